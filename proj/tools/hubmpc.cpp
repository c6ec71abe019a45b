#include <cstdio>

int main() {
  std::puts("hubmpc: commands not yet wired");
  return 2;
}
