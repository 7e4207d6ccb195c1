// gsae-corpus: writes a deterministic synthetic English-like byte corpus.

#include <iostream>

#include <CLI11.hpp>

#include "gsae/binary_io.hpp"
#include "gsae/corpus.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate a synthetic text corpus"};
  std::size_t bytes = 5u << 20;
  std::uint64_t seed = 0;
  std::string out;
  app.add_option("--bytes", bytes, "Corpus size in bytes")->capture_default_str();
  app.add_option("--seed", seed, "Generator seed")->capture_default_str();
  app.add_option("--out", out, "Output file")->required();
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  try {
    gsae::io::write_file_atomic(out, gsae::generate_synthetic_corpus(bytes, seed));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
