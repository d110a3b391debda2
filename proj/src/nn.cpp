#include "invmat/nn.hpp"

// Anchor the two scalar instantiations used across the project: float for
// production inference and training, double for finite-difference testing.
namespace invmat::nn {

template class UNet<float>;
template class UNet<double>;

}  // namespace invmat::nn
