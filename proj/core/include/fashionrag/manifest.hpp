#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace fashionrag {

std::string sha256_bytes(const void* data, size_t n);
std::string sha256_file(const std::string& path);

// Every command records what it ran with: config echo, seed, and content
// hashes of its file inputs. Written as pretty JSON next to the outputs.
struct RunManifest {
    std::string command;
    std::map<std::string, std::string> config_echo;
    std::map<std::string, std::string> input_hashes;  // path -> sha256
    std::map<std::string, std::string> outputs;       // label -> path
    uint64_t seed = 0;

    void add_input(const std::string& path);  // hashes the file now
    void write(const std::string& path) const;
};

// Creates runs/<stamp>/{checkpoints,images,reports} under root and returns
// the run directory. The stamp is time-based with a collision suffix.
std::string make_run_dir(const std::string& root);

}  // namespace fashionrag
