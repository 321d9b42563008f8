#include <string>
#include <vector>

#include "sentlab/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return sentlab::run_cli(args);
}
