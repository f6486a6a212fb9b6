#include <string>
#include <vector>

#include "mmlab/cli.hpp"

int main(int argc, char** argv) {
  return mmlab::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
