#include <cstdio>

#include "zmd/version.hpp"

int main(int argc, char** argv) {
  (void)argc;
  (void)argv;
  std::printf("zmd %s\n", zmd::version());
  return 0;
}
