#include "refdet/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "refdet/errors.hpp"

using nlohmann::json;

namespace refdet {

namespace {

constexpr char kMagic[8] = {'R', 'F', 'D', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;
constexpr uint32_t kDtypeF32 = 1;

// CRC-32 (IEEE 802.3 polynomial), table-driven.
const std::array<uint32_t, 256>& crc_table() {
    static const std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    return table;
}

uint32_t crc32(const std::string& data) {
    uint32_t c = 0xFFFFFFFFu;
    for (const char ch : data)
        c = crc_table()[(c ^ static_cast<unsigned char>(ch)) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw IntegrityError("checkpoint truncated");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

void put_matrix(std::string& out, const MatF& m) {
    put_u32(out, static_cast<uint32_t>(m.rows()));
    put_u32(out, static_cast<uint32_t>(m.cols()));
    const size_t bytes = static_cast<size_t>(m.size()) * sizeof(float);
    const size_t off = out.size();
    out.resize(off + bytes);
    std::memcpy(out.data() + off, m.data(), bytes);
}

MatF get_matrix(Reader& r) {
    const uint32_t rows = r.u32();
    const uint32_t cols = r.u32();
    const size_t bytes = static_cast<size_t>(rows) * cols * sizeof(float);
    const std::string data = r.bytes(bytes);
    MatF m(rows, cols);
    std::memcpy(m.data(), data.data(), bytes);
    return m;
}

json model_config_to_json(const ModelConfig& c) {
    return json{{"d_model", c.d_model},
                {"patch_len", c.patch_len},
                {"d_raw", c.d_raw},
                {"time_conv_layers", c.time_conv_layers},
                {"conv_kernel", c.conv_kernel},
                {"f_prime", c.f_prime},
                {"tab_hidden", c.tab_hidden},
                {"window", c.window},
                {"inventory_size", c.inventory_size},
                {"log_layers", c.log_layers},
                {"log_heads", c.log_heads},
                {"layers", c.layers},
                {"heads", c.heads},
                {"prompt_len", c.prompt_len},
                {"max_ref_count", c.max_ref_count},
                {"ln_eps", c.ln_eps},
                {"instance_norm_eps", c.instance_norm_eps}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model");
    c.patch_len = j.at("patch_len");
    c.d_raw = j.at("d_raw");
    c.time_conv_layers = j.at("time_conv_layers");
    c.conv_kernel = j.at("conv_kernel");
    c.f_prime = j.at("f_prime");
    c.tab_hidden = j.at("tab_hidden");
    c.window = j.at("window");
    c.inventory_size = j.at("inventory_size");
    c.log_layers = j.at("log_layers");
    c.log_heads = j.at("log_heads");
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.prompt_len = j.at("prompt_len");
    c.max_ref_count = j.at("max_ref_count");
    c.ln_eps = j.at("ln_eps");
    c.instance_norm_eps = j.at("instance_norm_eps");
    return c;
}

json train_config_to_json(const TrainConfig& c) {
    return json{{"k", c.k},
                {"alpha", c.alpha},
                {"ratio_simple", c.ratio_simple},
                {"ratio_hard", c.ratio_hard},
                {"epochs", c.epochs},
                {"steps_per_epoch", c.steps_per_epoch},
                {"learning_rate", c.learning_rate},
                {"batch_time", c.batch_time},
                {"batch_tab", c.batch_tab},
                {"batch_log", c.batch_log},
                {"seed", c.seed},
                {"grad_clip", c.grad_clip},
                {"adam_beta1", c.adam_beta1},
                {"adam_beta2", c.adam_beta2},
                {"adam_eps", c.adam_eps},
                {"time_size_floor", c.time_size_floor},
                {"grad_slots", c.grad_slots},
                {"printed_loss_form", c.printed_loss_form},
                {"universal", c.universal},
                {"task_modality", to_string(c.task_modality)}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.k = j.at("k");
    c.alpha = j.at("alpha");
    c.ratio_simple = j.at("ratio_simple");
    c.ratio_hard = j.at("ratio_hard");
    c.epochs = j.at("epochs");
    c.steps_per_epoch = j.at("steps_per_epoch");
    c.learning_rate = j.at("learning_rate");
    c.batch_time = j.at("batch_time");
    c.batch_tab = j.at("batch_tab");
    c.batch_log = j.at("batch_log");
    c.seed = j.at("seed");
    c.grad_clip = j.at("grad_clip");
    c.adam_beta1 = j.at("adam_beta1");
    c.adam_beta2 = j.at("adam_beta2");
    c.adam_eps = j.at("adam_eps");
    c.time_size_floor = j.at("time_size_floor");
    c.grad_slots = j.at("grad_slots");
    c.printed_loss_form = j.at("printed_loss_form");
    c.universal = j.at("universal");
    c.task_modality = modality_from_string(j.at("task_modality"));
    return c;
}

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    json header;
    header["model"] = model_config_to_json(ckpt.model_config);
    header["train"] = train_config_to_json(ckpt.train_config);
    header["rng_state"] = ckpt.rng_state;
    header["epochs_done"] = ckpt.epochs_done;
    header["inventory_path"] = ckpt.inventory_path;
    header["inventory_size"] = ckpt.inventory_size;
    header["adam_t"] = ckpt.adam.t;
    const std::string header_str = header.dump();

    std::string body;
    body.reserve(header_str.size() + ckpt.params.total_scalars() * 12 + 4096);
    body.append(kMagic, sizeof(kMagic));
    put_u32(body, kVersion);
    put_u32(body, kDtypeF32);
    put_u64(body, header_str.size());
    body += header_str;

    put_u64(body, static_cast<uint64_t>(ckpt.params.count()));
    for (int i = 0; i < ckpt.params.count(); ++i) {
        const std::string& name = ckpt.params.name(i);
        put_u32(body, static_cast<uint32_t>(name.size()));
        body += name;
        put_matrix(body, ckpt.params.at(i));
    }
    const bool has_adam = !ckpt.adam.m.empty();
    put_u32(body, has_adam ? 1 : 0);
    if (has_adam) {
        if (ckpt.adam.m.size() != static_cast<size_t>(ckpt.params.count()) ||
            ckpt.adam.v.size() != static_cast<size_t>(ckpt.params.count()))
            throw IntegrityError("adam state size mismatch while saving");
        for (const MatF& m : ckpt.adam.m) put_matrix(body, m);
        for (const MatF& v : ckpt.adam.v) put_matrix(body, v);
    }
    put_u32(body, crc32(body));

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out) throw DataError("short write on checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string buf = ss.str();
    if (buf.size() < sizeof(kMagic) + 12 + 4) throw IntegrityError("checkpoint too small");

    const std::string payload = buf.substr(0, buf.size() - 4);
    Reader tail{buf, buf.size() - 4};
    const uint32_t stored_crc = tail.u32();
    if (crc32(payload) != stored_crc)
        throw IntegrityError("checkpoint checksum mismatch: " + path);

    Reader r{payload, 0};
    if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
        throw IntegrityError("not a checkpoint file: " + path);
    if (r.u32() != kVersion) throw IntegrityError("unsupported checkpoint version");
    if (r.u32() != kDtypeF32) throw IntegrityError("unsupported checkpoint dtype");

    const uint64_t header_len = r.u64();
    json header;
    try {
        header = json::parse(r.bytes(header_len));
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("checkpoint header unreadable: ") + e.what());
    }

    Checkpoint ckpt;
    ckpt.model_config = model_config_from_json(header.at("model"));
    ckpt.train_config = train_config_from_json(header.at("train"));
    ckpt.rng_state = header.at("rng_state");
    ckpt.epochs_done = header.at("epochs_done");
    ckpt.inventory_path = header.at("inventory_path");
    ckpt.inventory_size = header.at("inventory_size");

    const uint64_t n_params = r.u64();
    for (uint64_t i = 0; i < n_params; ++i) {
        const uint32_t name_len = r.u32();
        const std::string name = r.bytes(name_len);
        MatF m = get_matrix(r);
        ckpt.params.add(name, static_cast<int>(m.rows()), static_cast<int>(m.cols()));
        ckpt.params.at(static_cast<int>(i)) = std::move(m);
    }
    if (r.u32() != 0) {
        ckpt.adam.m.reserve(n_params);
        ckpt.adam.v.reserve(n_params);
        for (uint64_t i = 0; i < n_params; ++i) ckpt.adam.m.push_back(get_matrix(r));
        for (uint64_t i = 0; i < n_params; ++i) ckpt.adam.v.push_back(get_matrix(r));
    }
    ckpt.adam.t = header.at("adam_t").get<std::vector<long>>();
    if (!ckpt.adam.t.empty() && ckpt.adam.t.size() != n_params)
        throw IntegrityError("adam step counters do not match parameter count");
    return ckpt;
}

void ensure_compatible(const Checkpoint& ckpt, const ModelConfig& requested) {
    const json a = model_config_to_json(ckpt.model_config);
    const json b = model_config_to_json(requested);
    for (const auto& [key, val] : b.items()) {
        if (a.at(key) != val)
            throw ConfigError("checkpoint architecture mismatch on '" + key + "': checkpoint " +
                              a.at(key).dump() + " vs requested " + val.dump());
    }
}

} // namespace refdet
