#include <string>
#include <vector>

#include "blackout/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return blackout::run_cli(args);
}
