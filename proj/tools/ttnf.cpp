#include <string>
#include <vector>

#include "ttnf/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ttnf::cli::run(args);
}
