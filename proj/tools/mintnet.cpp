#include <string>
#include <vector>

#include "mintnet/cli.hpp"

int main(int argc, char** argv) {
  return mintnet::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
