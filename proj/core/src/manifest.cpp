#include "fashionrag/manifest.hpp"

#include <openssl/evp.h>

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace fashionrag {

namespace {

std::string hex(const unsigned char* d, unsigned n) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(n * 2);
    for (unsigned i = 0; i < n; ++i) {
        out.push_back(digits[d[i] >> 4]);
        out.push_back(digits[d[i] & 0xf]);
    }
    return out;
}

}  // namespace

std::string sha256_bytes(const void* data, size_t n) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, data, n) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw std::runtime_error("sha256: digest failed");
    }
    EVP_MD_CTX_free(ctx);
    return hex(md, len);
}

std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("sha256: cannot open " + path);
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
        EVP_MD_CTX_free(ctx);
        throw std::runtime_error("sha256: init failed");
    }
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        const std::streamsize got = in.gcount();
        if (got > 0 && EVP_DigestUpdate(ctx, buf, static_cast<size_t>(got)) != 1) {
            EVP_MD_CTX_free(ctx);
            throw std::runtime_error("sha256: update failed");
        }
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx, md, &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw std::runtime_error("sha256: final failed");
    }
    EVP_MD_CTX_free(ctx);
    return hex(md, len);
}

void RunManifest::add_input(const std::string& path) {
    input_hashes[path] = sha256_file(path);
}

void RunManifest::write(const std::string& path) const {
    nlohmann::json j;
    j["command"] = command;
    j["seed"] = seed;
    j["config"] = config_echo;
    j["inputs"] = input_hashes;
    j["outputs"] = outputs;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("manifest: cannot write " + path);
    out << j.dump(2) << "\n";
}

std::string make_run_dir(const std::string& root) {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    char stamp[32];
    std::tm tmv{};
    gmtime_r(&t, &tmv);
    std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tmv);

    fs::path base = fs::path(root) / "runs";
    fs::create_directories(base);
    fs::path dir = base / stamp;
    for (int suffix = 1; fs::exists(dir); ++suffix)
        dir = base / (std::string(stamp) + "-" + std::to_string(suffix));
    fs::create_directories(dir / "checkpoints");
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "reports");
    return dir.string();
}

}  // namespace fashionrag
