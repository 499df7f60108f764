#include "vitc/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "vitc/errors.hpp"
#include "vitc/util/hash.hpp"

namespace vitc {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

using nn::Tensor;
using nn::Var;

namespace {

constexpr const char* kMagic = "VITC-CHECKPOINT 1";
constexpr ChannelKind kKinds[] = {ChannelKind::q, ChannelKind::k, ChannelKind::v, ChannelKind::proj,
                                  ChannelKind::fc1};

void write_indices(std::ostream& os, const std::vector<int64_t>& idx) {
    for (int64_t i : idx) os << ' ' << i;
    os << '\n';
}

[[noreturn]] void fail(const std::string& msg) { throw CheckpointError("checkpoint: " + msg); }

}  // namespace

std::string serialize_checkpoint(const ViTModel& model) {
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    for (const auto& [name, v] : model.named_parameters()) tensors.emplace_back(name, &v.value());
    for (size_t l = 0; l < model.compactors.size(); ++l) {
        for (auto kind : kKinds) {
            tensors.emplace_back("masks." + std::to_string(l) + "." + kind_name(kind),
                                 &model.compactors[l].mask(kind));
        }
    }

    std::ostringstream head;
    const ViTConfig& c = model.config;
    head << kMagic << '\n';
    head << "config depth " << c.depth << '\n'
         << "config dim " << c.dim << '\n'
         << "config heads " << c.heads << '\n'
         << "config head_dim " << c.head_dim << '\n'
         << "config patch " << c.patch << '\n'
         << "config img " << c.img << '\n'
         << "config classes " << c.classes << '\n'
         << "config mlp_ratio " << c.mlp_ratio << '\n'
         << "config use_cls " << (c.use_cls ? 1 : 0) << '\n'
         << "config final_norm " << (c.final_norm ? 1 : 0) << '\n';
    for (const auto& e : model.plan.entries()) head << "merge " << e.after_block << ' ' << atme::direction_code(e.direction) << '\n';
    for (const auto& [k, v] : model.meta) {
        if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
            fail("meta entries must be single-line with space-free keys ('" + k + "')");
        }
        head << "meta " << k << ' ' << v << '\n';
    }
    for (size_t l = 0; l < model.retained.size(); ++l) {
        const auto& r = model.retained[l];
        for (size_t h = 0; h < r.qk.size(); ++h) {
            head << "retained " << l << " qk " << h;
            write_indices(head, r.qk[h]);
        }
        for (size_t h = 0; h < r.v.size(); ++h) {
            head << "retained " << l << " v " << h;
            write_indices(head, r.v[h]);
        }
        head << "retained " << l << " proj";
        write_indices(head, r.proj);
        head << "retained " << l << " fc1";
        write_indices(head, r.fc1);
    }
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        head << "tensor " << name << " f32 " << t->rank();
        for (int64_t d : t->shape()) head << ' ' << d;
        head << ' ' << offset << '\n';
        offset += static_cast<uint64_t>(t->numel()) * sizeof(float);
    }
    head << "end\n";

    std::string out = head.str();
    const size_t payload_start = out.size();
    out.resize(payload_start + offset);
    char* dst = out.data() + payload_start;
    for (const auto& [name, t] : tensors) {
        const size_t bytes = static_cast<size_t>(t->numel()) * sizeof(float);
        if (bytes) std::memcpy(dst, t->ptr(), bytes);
        dst += bytes;
    }
    return out;
}

ViTModel deserialize_checkpoint(const std::string& bytes) {
    size_t pos = 0;
    auto next_line = [&]() -> std::string {
        const size_t end = bytes.find('\n', pos);
        if (end == std::string::npos) fail("unterminated header");
        std::string line = bytes.substr(pos, end - pos);
        pos = end + 1;
        return line;
    };
    if (next_line() != kMagic) fail("bad magic (expected '" + std::string(kMagic) + "')");

    ViTModel model;
    ViTConfig& c = model.config;
    std::map<std::string, int> fields_seen;
    std::vector<atme::MergeEntry> entries;
    struct Manifest {
        std::string name;
        nn::Shape shape;
        uint64_t offset;
    };
    std::vector<Manifest> manifest;
    std::map<size_t, RetainedChannels> retained;

    for (;;) {
        const std::string line = next_line();
        if (line == "end") break;
        std::istringstream is(line);
        std::string tag;
        is >> tag;
        if (tag == "config") {
            std::string key;
            long long value = 0;
            if (!(is >> key >> value)) fail("bad config line '" + line + "'");
            fields_seen[key]++;
            if (key == "depth") c.depth = static_cast<int>(value);
            else if (key == "dim") c.dim = static_cast<int>(value);
            else if (key == "heads") c.heads = static_cast<int>(value);
            else if (key == "head_dim") c.head_dim = static_cast<int>(value);
            else if (key == "patch") c.patch = static_cast<int>(value);
            else if (key == "img") c.img = static_cast<int>(value);
            else if (key == "classes") c.classes = static_cast<int>(value);
            else if (key == "mlp_ratio") c.mlp_ratio = static_cast<int>(value);
            else if (key == "use_cls") c.use_cls = value != 0;
            else if (key == "final_norm") c.final_norm = value != 0;
            else fail("unknown config field '" + key + "'");
        } else if (tag == "merge") {
            int block = 0;
            char dir = 0;
            if (!(is >> block >> dir) || (dir != 'h' && dir != 'v')) fail("bad merge line '" + line + "'");
            entries.push_back({block, dir == 'h' ? atme::MergeDirection::horizontal : atme::MergeDirection::vertical});
        } else if (tag == "meta") {
            std::string key;
            is >> key;
            std::string value;
            std::getline(is, value);
            if (!value.empty() && value.front() == ' ') value.erase(0, 1);
            model.meta[key] = value;
        } else if (tag == "retained") {
            size_t block = 0;
            std::string kind;
            if (!(is >> block >> kind)) fail("bad retained line '" + line + "'");
            auto& r = retained[block];
            std::vector<int64_t>* target = nullptr;
            if (kind == "qk" || kind == "v") {
                size_t head = 0;
                if (!(is >> head)) fail("bad retained line '" + line + "'");
                auto& list = kind == "qk" ? r.qk : r.v;
                if (list.size() <= head) list.resize(head + 1);
                target = &list[head];
            } else if (kind == "proj") {
                target = &r.proj;
            } else if (kind == "fc1") {
                target = &r.fc1;
            } else {
                fail("bad retained kind '" + kind + "'");
            }
            int64_t idx = 0;
            while (is >> idx) target->push_back(idx);
        } else if (tag == "tensor") {
            Manifest m;
            std::string dtype;
            int64_t rank = 0;
            if (!(is >> m.name >> dtype >> rank) || dtype != "f32" || rank < 0) fail("bad tensor line '" + line + "'");
            m.shape.resize(static_cast<size_t>(rank));
            for (auto& d : m.shape)
                if (!(is >> d) || d < 0) fail("bad tensor line '" + line + "'");
            if (!(is >> m.offset)) fail("bad tensor line '" + line + "'");
            manifest.push_back(std::move(m));
        } else {
            fail("unknown header line '" + line + "'");
        }
    }
    if (fields_seen.size() != 10) fail("header lists " + std::to_string(fields_seen.size()) + " of 10 config fields");
    try {
        c.validate();
    } catch (const ConfigError& e) {
        fail(e.what());
    }

    const size_t payload = pos;
    std::map<std::string, Tensor> tensors;
    for (const auto& m : manifest) {
        const uint64_t n = static_cast<uint64_t>(nn::shape_numel(m.shape));
        const uint64_t end = payload + m.offset + n * sizeof(float);
        if (end > bytes.size()) {
            fail("truncated payload: tensor " + m.name + " needs bytes up to " + std::to_string(end) + ", file has " +
                 std::to_string(bytes.size()));
        }
        Tensor t(m.shape);
        if (n) std::memcpy(t.ptr(), bytes.data() + payload + m.offset, n * sizeof(float));
        if (!tensors.emplace(m.name, std::move(t)).second) fail("duplicate tensor " + m.name);
    }

    auto take = [&](const std::string& name) -> Tensor {
        auto it = tensors.find(name);
        if (it == tensors.end()) fail("missing tensor " + name);
        Tensor t = std::move(it->second);
        tensors.erase(it);
        return t;
    };
    auto take_param = [&](const std::string& name) { return Var::parameter(take(name)); };

    model.patch_weight = take_param("patch_embed.weight");
    model.patch_bias = take_param("patch_embed.bias");
    if (c.use_cls) model.cls_token = take_param("cls_token");
    model.pos_embed = take_param("pos_embed");
    for (int l = 0; l < c.depth; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        BlockWeights b;
        b.norm1_weight = take_param(p + "norm1.weight");
        b.norm1_bias = take_param(p + "norm1.bias");
        b.q_weight = take_param(p + "attn.q.weight");
        b.q_bias = take_param(p + "attn.q.bias");
        b.k_weight = take_param(p + "attn.k.weight");
        b.k_bias = take_param(p + "attn.k.bias");
        b.v_weight = take_param(p + "attn.v.weight");
        b.v_bias = take_param(p + "attn.v.bias");
        b.proj_weight = take_param(p + "attn.proj.weight");
        b.proj_bias = take_param(p + "attn.proj.bias");
        b.norm2_weight = take_param(p + "norm2.weight");
        b.norm2_bias = take_param(p + "norm2.bias");
        b.fc1_weight = take_param(p + "mlp.fc1.weight");
        b.fc1_bias = take_param(p + "mlp.fc1.bias");
        b.fc2_weight = take_param(p + "mlp.fc2.weight");
        b.fc2_bias = take_param(p + "mlp.fc2.bias");
        model.blocks.push_back(std::move(b));
    }
    for (size_t i = 0; i < entries.size(); ++i) {
        const std::string p = "merges." + std::to_string(i) + ".";
        atme::FusionLayer f;
        f.norm_weight = take_param(p + "norm.weight");
        f.norm_bias = take_param(p + "norm.bias");
        f.weight = take_param(p + "fc.weight");
        f.bias = take_param(p + "fc.bias");
        model.merges.push_back(std::move(f));
    }
    model.plan = atme::MergePlan(entries);
    try {
        model.plan.validate(c);
    } catch (const PlacementError& e) {
        fail(e.what());
    }
    if (c.final_norm) {
        model.norm_weight = take_param("norm.weight");
        model.norm_bias = take_param("norm.bias");
    }
    model.head_weight = take_param("head.weight");
    model.head_bias = take_param("head.bias");
    if (tensors.count("compactors.0.q")) {
        for (int l = 0; l < c.depth; ++l) {
            const std::string p = "compactors." + std::to_string(l) + ".";
            const std::string mp = "masks." + std::to_string(l) + ".";
            BlockCompactors cp;
            for (auto kind : kKinds) {
                cp.matrix(kind) = take_param(p + kind_name(kind));
                cp.mask(kind) = take(mp + kind_name(kind));
            }
            model.compactors.push_back(std::move(cp));
        }
    }
    if (!tensors.empty()) fail("unexpected tensor " + tensors.begin()->first);

    if (!retained.empty()) {
        if (retained.size() != static_cast<size_t>(c.depth)) fail("retained lists do not cover every block");
        for (auto& [l, r] : retained) {
            if (l >= static_cast<size_t>(c.depth)) fail("retained list for unknown block");
            if (static_cast<int64_t>(r.proj.size()) < c.dim) model.blocks[l].proj_index = r.proj;
            model.retained.push_back(std::move(r));
        }
    }
    return model;
}

void save_checkpoint(const ViTModel& model, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(model);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail("cannot open " + path.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) fail("write to " + path.string() + " failed");
}

ViTModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("cannot open " + path.string());
    std::ostringstream buf;
    buf << is.rdbuf();
    return deserialize_checkpoint(buf.str());
}

std::string checkpoint_hash(const ViTModel& model) { return hex64(fnv1a64(serialize_checkpoint(model))); }

}  // namespace vitc
