// Command-line entry point. All behavior lives in fgmdm/cli.hpp so the test
// suite can drive the same dispatch path in-process.

#include <string>
#include <vector>

#include "fgmdm/cli.hpp"

int main(int argc, char** argv) {
  return fgmdm::dispatch(std::vector<std::string>(argv + 1, argv + argc));
}
