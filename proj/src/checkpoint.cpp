#include "checkpoint.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>

namespace hpn::nn {

namespace {
constexpr char kMagic[8] = {'H', 'P', 'N', 'C', 'K', 'P', 'T', '1'};

struct File {
    std::FILE* f = nullptr;
    explicit File(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {}
    ~File() {
        if (f) std::fclose(f);
    }
};

// This project only targets little-endian hosts; serialize raw.
void write_u32(std::FILE* f, uint32_t v) {
    if (std::fwrite(&v, sizeof(v), 1, f) != 1) throw IoError("checkpoint: write failed");
}

uint32_t read_u32(std::FILE* f) {
    uint32_t v = 0;
    if (std::fread(&v, sizeof(v), 1, f) != 1) throw IoError("checkpoint: truncated file");
    return v;
}
}  // namespace

void save_checkpoint(const std::string& path, const std::vector<const Param*>& params) {
    File fh(path, "wb");
    if (!fh.f) throw IoError("checkpoint: cannot open for writing: " + path);
    if (std::fwrite(kMagic, 1, 8, fh.f) != 8) throw IoError("checkpoint: write failed");
    for (const Param* p : params) {
        write_u32(fh.f, static_cast<uint32_t>(p->name.size()));
        if (std::fwrite(p->name.data(), 1, p->name.size(), fh.f) != p->name.size())
            throw IoError("checkpoint: write failed");
        write_u32(fh.f, static_cast<uint32_t>(p->value.rank()));
        for (int d : p->value.shape()) write_u32(fh.f, static_cast<uint32_t>(d));
        size_t n = static_cast<size_t>(p->value.numel());
        if (std::fwrite(p->value.data(), sizeof(double), n, fh.f) != n)
            throw IoError("checkpoint: write failed");
    }
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
    File fh(path, "rb");
    if (!fh.f) throw IoError("checkpoint: cannot open: " + path);
    char magic[8];
    if (std::fread(magic, 1, 8, fh.f) != 8 || std::memcmp(magic, kMagic, 8) != 0)
        throw ParseError("checkpoint: bad magic in " + path);
    std::map<std::string, Tensor> out;
    for (;;) {
        uint32_t name_len = 0;
        if (std::fread(&name_len, sizeof(name_len), 1, fh.f) != 1) break;  // EOF
        std::string name(name_len, '\0');
        if (std::fread(name.data(), 1, name_len, fh.f) != name_len)
            throw ParseError("checkpoint: truncated name");
        uint32_t rank = read_u32(fh.f);
        if (rank > 8) throw ParseError("checkpoint: implausible rank");
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(read_u32(fh.f));
        Tensor t(shape);
        size_t n = static_cast<size_t>(t.numel());
        if (std::fread(t.data(), sizeof(double), n, fh.f) != n)
            throw ParseError("checkpoint: truncated data for " + name);
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

void load_params(const std::map<std::string, Tensor>& store, std::vector<Param*> params) {
    for (Param* p : params) {
        auto it = store.find(p->name);
        if (it == store.end())
            throw ParseError("checkpoint: missing tensor '" + p->name + "'");
        if (!(it->second.shape() == p->value.shape()))
            throw ShapeError("checkpoint: shape mismatch for '" + p->name + "'");
        p->value = it->second;
    }
}

uint64_t tensor_hash(const Tensor& t) {
    uint64_t h = fnv1a(t.data(), static_cast<size_t>(t.numel()) * sizeof(double));
    for (int d : t.shape()) h = fnv1a(&d, sizeof(d), h);
    return h;
}

uint64_t params_hash(const std::vector<const Param*>& params) {
    std::vector<const Param*> sorted = params;
    std::sort(sorted.begin(), sorted.end(),
              [](const Param* a, const Param* b) { return a->name < b->name; });
    uint64_t h = 0xcbf29ce484222325ull;
    for (const Param* p : sorted) {
        h = fnv1a(p->name.data(), p->name.size(), h);
        uint64_t th = tensor_hash(p->value);
        h = fnv1a(&th, sizeof(th), h);
    }
    return h;
}

}  // namespace hpn::nn
