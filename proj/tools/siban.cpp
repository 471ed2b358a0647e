#include <string>
#include <vector>

#include "siban/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return siban::run_cli(args);
}
