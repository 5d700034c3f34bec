#include "patchflow/checkpoint.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace patchflow {

namespace {

constexpr char kMagic[8] = {'P', 'F', 'C', 'K', 'P', 'T', '0', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, static_cast<std::uint32_t>(v));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& is) {
    const std::uint64_t lo = get_u32(is);
    return lo | (static_cast<std::uint64_t>(get_u32(is)) << 32);
}

void put_floats(std::ostream& os, const std::vector<float>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(float)));
}

void get_floats(std::istream& is, std::vector<float>& v) {
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(float)));
    if (!is) throw std::runtime_error("checkpoint: truncated param data");
}

CheckpointMeta read_header(std::istream& is, const std::string& path) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    CheckpointMeta meta;
    meta.step = get_u64(is);
    meta.adam_t = get_u64(is);
    const std::uint64_t clen = get_u64(is);
    meta.config_text.resize(clen);
    is.read(meta.config_text.data(), static_cast<std::streamsize>(clen));
    if (!is) throw std::runtime_error("checkpoint: truncated config block");
    return meta;
}

} // namespace

void save_checkpoint(const std::string& path, const ParamStore& store,
                     std::uint64_t step, std::uint64_t adam_t,
                     const std::string& config_text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + tmp);
        os.write(kMagic, 8);
        put_u64(os, step);
        put_u64(os, adam_t);
        put_u64(os, config_text.size());
        os.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
        put_u64(os, store.all().size());
        for (const auto& [name, p] : store.all()) {
            put_u32(os, static_cast<std::uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            put_u32(os, static_cast<std::uint32_t>(p->rows));
            put_u32(os, static_cast<std::uint32_t>(p->cols));
            put_floats(os, p->w);
            put_floats(os, p->m);
            put_floats(os, p->v);
        }
        if (!os) throw std::runtime_error("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

CheckpointMeta load_checkpoint(const std::string& path, ParamStore& store) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    CheckpointMeta meta = read_header(is, path);
    const std::uint64_t n = get_u64(is);
    if (n != store.all().size())
        throw std::runtime_error("checkpoint holds " + std::to_string(n) +
                                 " params, model has " + std::to_string(store.all().size()));
    for (std::uint64_t i = 0; i < n; ++i) {
        const std::uint32_t nl = get_u32(is);
        std::string name(nl, '\0');
        is.read(name.data(), nl);
        if (!is) throw std::runtime_error("checkpoint: truncated param name");
        if (!store.has(name))
            throw std::runtime_error("checkpoint param " + name + " not in model");
        ParamPtr p = store.get(name);
        const int rows = static_cast<int>(get_u32(is)), cols = static_cast<int>(get_u32(is));
        if (rows != p->rows || cols != p->cols)
            throw std::runtime_error("checkpoint shape mismatch for " + name + ": file " +
                                     std::to_string(rows) + "x" + std::to_string(cols) +
                                     ", model " + std::to_string(p->rows) + "x" +
                                     std::to_string(p->cols));
        get_floats(is, p->w);
        get_floats(is, p->m);
        get_floats(is, p->v);
        p->refresh();
    }
    return meta;
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    return read_header(is, path);
}

std::vector<std::string> config_diff(const std::string& ours, const std::string& theirs) {
    auto parse = [](const std::string& text) {
        std::map<std::string, std::string> kv;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            auto trim = [](std::string s) {
                const auto a = s.find_first_not_of(" \t");
                const auto b = s.find_last_not_of(" \t\r");
                return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
            };
            kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
        return kv;
    };
    auto a = parse(ours), b = parse(theirs);
    std::vector<std::string> out;
    for (const auto& [k, v] : a) {
        auto it = b.find(k);
        if (it == b.end())
            out.push_back(k + ": ours=" + v + " checkpoint=<absent>");
        else if (it->second != v)
            out.push_back(k + ": ours=" + v + " checkpoint=" + it->second);
    }
    for (const auto& [k, v] : b)
        if (!a.count(k)) out.push_back(k + ": ours=<absent> checkpoint=" + v);
    return out;
}

std::string checkpoint_name(std::uint64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_%08llu.pfckpt",
                  static_cast<unsigned long long>(step));
    return buf;
}

std::string latest_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) return {};
    std::string best;
    std::uint64_t best_step = 0;
    bool found = false;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string n = e.path().filename().string();
        if (n.size() != 20 || n.rfind("ckpt_", 0) != 0 || n.substr(13) != ".pfckpt") continue;
        const std::uint64_t s = std::strtoull(n.substr(5, 8).c_str(), nullptr, 10);
        if (!found || s >= best_step) {
            best_step = s;
            best = e.path().string();
            found = true;
        }
    }
    return best;
}

} // namespace patchflow
