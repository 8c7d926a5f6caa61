#include <CLI11.hpp>

#include <cstdio>

int main(int argc, char** argv) {
  CLI::App app{"carvemap: lidar+camera textured mesh mapping"};
  app.require_subcommand(1);
  CLI11_PARSE(app, argc, argv);
  return 0;
}
