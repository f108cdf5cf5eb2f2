#include <iostream>
#include <vector>

int main(int argc, char** argv) {
  // placeholder until the cli module lands
  std::vector<std::string> args(argv + 1, argv + argc);
  std::cerr << "lpanet: no commands wired yet\n";
  return args.empty() ? 2 : 2;
}
