#include <string>
#include <vector>

#include "invmat/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return invmat::cli_dispatch(args);
}
