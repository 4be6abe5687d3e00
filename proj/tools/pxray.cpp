#include <string>
#include <vector>

#include "pxray/cli.hpp"

int main(int argc, char** argv) {
  return pxray::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
