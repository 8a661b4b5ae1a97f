#include "cycgrid/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cycgrid {

namespace {

constexpr char kMagic[4] = {'C', 'Y', 'C', 'G'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ofstream& out, uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_u64(std::ofstream& out, uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_i64(std::ofstream& out, int64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

uint32_t get_u32(std::ifstream& in) {
    uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
        throw std::runtime_error("load error: truncated checkpoint");
    return v;
}

uint64_t get_u64(std::ifstream& in) {
    uint64_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
        throw std::runtime_error("load error: truncated checkpoint");
    return v;
}

int64_t get_i64(std::ifstream& in) {
    int64_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
        throw std::runtime_error("load error: truncated checkpoint");
    return v;
}

void put_tensor(std::ofstream& out, const std::string& name, const Tensor& t) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (int d : t.dims) put_u32(out, static_cast<uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.v.data()),
              static_cast<std::streamsize>(t.v.size() * sizeof(double)));
}

void get_tensor(std::ifstream& in, const std::string& expect_name, Tensor& t) {
    const uint32_t name_len = get_u32(in);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len))
        throw std::runtime_error("load error: truncated checkpoint");
    if (name != expect_name)
        throw std::runtime_error("load error: tensor order mismatch, expected " + expect_name +
                                 " got " + name);
    const uint32_t rank = get_u32(in);
    if (rank != static_cast<uint32_t>(t.rank()))
        throw std::runtime_error("load error: rank mismatch for " + name);
    size_t total = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        const uint32_t d = get_u32(in);
        if (d != static_cast<uint32_t>(t.dims[i]))
            throw std::runtime_error("load error: dim mismatch for " + name);
        total *= d;
    }
    if (total != t.v.size()) throw std::runtime_error("load error: size mismatch for " + name);
    if (!in.read(reinterpret_cast<char*>(t.v.data()),
                 static_cast<std::streamsize>(total * sizeof(double))))
        throw std::runtime_error("load error: truncated checkpoint");
}

void put_raw(std::ofstream& out, const Tensor& t) {
    out.write(reinterpret_cast<const char*>(t.v.data()),
              static_cast<std::streamsize>(t.v.size() * sizeof(double)));
}

void get_raw(std::ifstream& in, Tensor& t) {
    if (!in.read(reinterpret_cast<char*>(t.v.data()),
                 static_cast<std::streamsize>(t.v.size() * sizeof(double))))
        throw std::runtime_error("load error: truncated checkpoint");
}

}  // namespace

void save_checkpoint(const Policy& policy, const OptimState* opt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<uint32_t>(policy.cfg.d_model));
    put_u32(out, static_cast<uint32_t>(policy.cfg.n_layers));
    put_u32(out, static_cast<uint32_t>(policy.cfg.n_heads));
    put_u32(out, static_cast<uint32_t>(policy.cfg.context));
    put_u32(out, static_cast<uint32_t>(policy.cfg.vocab));
    put_u64(out, vocab_hash());

    uint32_t n_tensors = 0;
    policy.p.for_each([&](const std::string&, const Tensor&) { ++n_tensors; });
    put_u32(out, n_tensors);
    policy.p.for_each([&](const std::string& name, const Tensor& t) { put_tensor(out, name, t); });

    out.put(opt ? 1 : 0);
    if (opt) {
        opt->m.for_each([&](const std::string&, const Tensor& t) { put_raw(out, t); });
        opt->v.for_each([&](const std::string&, const Tensor& t) { put_raw(out, t); });
        put_i64(out, opt->step_backbone);
        put_i64(out, opt->step_und);
        put_i64(out, opt->step_gen);
    }
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("load error: bad magic, not a CYCG checkpoint");
    const uint32_t version = get_u32(in);
    if (version != kVersion)
        throw std::runtime_error("load error: unsupported version " + std::to_string(version));

    ModelConfig cfg;
    cfg.d_model = static_cast<int>(get_u32(in));
    cfg.n_layers = static_cast<int>(get_u32(in));
    cfg.n_heads = static_cast<int>(get_u32(in));
    cfg.context = static_cast<int>(get_u32(in));
    cfg.vocab = static_cast<int>(get_u32(in));
    const uint64_t hash = get_u64(in);
    if (hash != vocab_hash())
        throw std::runtime_error("load error: vocab hash mismatch (checkpoint " +
                                 std::to_string(hash) + ", loader " +
                                 std::to_string(vocab_hash()) + ")");

    LoadedCheckpoint lc;
    lc.policy = init_policy(cfg, 0);
    uint32_t n_tensors = 0;
    lc.policy.p.for_each([&](const std::string&, Tensor&) { ++n_tensors; });
    if (get_u32(in) != n_tensors)
        throw std::runtime_error("load error: tensor count mismatch");
    lc.policy.p.for_each([&](const std::string& name, Tensor& t) { get_tensor(in, name, t); });

    char has_opt = 0;
    if (!in.get(has_opt)) throw std::runtime_error("load error: truncated checkpoint");
    if (has_opt) {
        OptimState opt = make_optim_state(lc.policy);
        opt.m.for_each([&](const std::string&, Tensor& t) { get_raw(in, t); });
        opt.v.for_each([&](const std::string&, Tensor& t) { get_raw(in, t); });
        opt.step_backbone = get_i64(in);
        opt.step_und = get_i64(in);
        opt.step_gen = get_i64(in);
        lc.opt = std::move(opt);
    }
    return lc;
}

}  // namespace cycgrid
