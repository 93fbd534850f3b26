#include "storygen/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace storygen {

namespace {

constexpr std::string_view kMagic = "storygen-checkpoint";

static_assert(sizeof(float) == 4);

std::uint32_t to_little(std::uint32_t v)
{
    if constexpr (std::endian::native == std::endian::big) {
        v = ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
    }
    return v;
}

std::string read_line(std::istream& in, const std::string& path)
{
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": truncated checkpoint");
    return line;
}

}  // namespace

const StoredTensor* Checkpoint::find(const std::string& name) const
{
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint)
{
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write checkpoint " + path);
        const std::string manifest = checkpoint.manifest.to_text();
        out << kMagic << ' ' << kCheckpointFormatVersion << '\n';
        out << "manifest " << manifest.size() << '\n' << manifest;
        out << "tensors " << checkpoint.tensors.size() << '\n';
        for (const auto& t : checkpoint.tensors) {
            if (t.name.find_first_of(" \n") != std::string::npos) throw UsageError("tensor name with whitespace");
            if (element_count(t.shape) != t.data.size()) throw ShapeError("stored tensor " + t.name + " size mismatch");
            out << "tensor " << t.name << ' ' << t.shape.size();
            for (auto d : t.shape) out << ' ' << d;
            out << '\n';
            std::vector<std::uint32_t> raw(t.data.size());
            for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = to_little(std::bit_cast<std::uint32_t>(t.data[i]));
            out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
        }
        if (!out) throw DataError("failed writing checkpoint " + path);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    Checkpoint ck;

    std::istringstream header(read_line(in, path));
    std::string magic;
    int version = 0;
    header >> magic >> version;
    if (magic != kMagic) throw DataError(path + ": not a checkpoint file");
    if (version != kCheckpointFormatVersion) {
        throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
    }

    std::istringstream mline(read_line(in, path));
    std::string word;
    std::size_t bytes = 0;
    if (!(mline >> word >> bytes) || word != "manifest") throw DataError(path + ": missing manifest");
    std::string manifest(bytes, '\0');
    if (!in.read(manifest.data(), static_cast<std::streamsize>(bytes))) throw DataError(path + ": truncated manifest");
    ck.manifest = KeyValueConfig::parse(manifest, path);

    std::istringstream tline(read_line(in, path));
    std::size_t count = 0;
    if (!(tline >> word >> count) || word != "tensors") throw DataError(path + ": missing tensor table");
    for (std::size_t i = 0; i < count; ++i) {
        std::istringstream rec(read_line(in, path));
        StoredTensor t;
        std::size_t rank = 0;
        if (!(rec >> word >> t.name >> rank) || word != "tensor") throw DataError(path + ": bad tensor record");
        t.shape.resize(rank);
        for (auto& d : t.shape) {
            if (!(rec >> d)) throw DataError(path + ": bad shape for " + t.name);
        }
        std::vector<std::uint32_t> raw(element_count(t.shape));
        if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4))) {
            throw DataError(path + ": truncated payload for " + t.name);
        }
        t.data.resize(raw.size());
        for (std::size_t j = 0; j < raw.size(); ++j) t.data[j] = std::bit_cast<float>(to_little(raw[j]));
        ck.tensors.push_back(std::move(t));
    }
    return ck;
}

std::uint64_t fnv1a64(std::string_view bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t file_hash(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return fnv1a64(buf.str());
}

std::string hex64(std::uint64_t value)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

void store_parameters(Checkpoint& checkpoint, const ParameterList<float>& params, const std::string& prefix)
{
    for (const auto& p : params) {
        checkpoint.tensors.push_back(
            {prefix + p.name, p.tensor.shape(), std::vector<float>(p.tensor.data().begin(), p.tensor.data().end())});
    }
}

void restore_parameters(const Checkpoint& checkpoint, const ParameterList<float>& params, const std::string& prefix)
{
    std::set<std::string> expected;
    for (const auto& p : params) {
        const std::string name = prefix + p.name;
        expected.insert(name);
        const auto* stored = checkpoint.find(name);
        if (!stored) throw DataError("checkpoint is missing parameter " + name);
        if (stored->shape != p.tensor.shape()) {
            throw DataError("checkpoint parameter " + name + " has shape " + to_string(stored->shape) + ", model expects " +
                            to_string(p.tensor.shape()));
        }
        auto& data = p.tensor.node().data;
        std::copy(stored->data.begin(), stored->data.end(), data.begin());
    }
    for (const auto& t : checkpoint.tensors) {
        if (t.name.rfind(prefix, 0) == 0 && !expected.count(t.name)) {
            throw DataError("checkpoint tensor " + t.name + " does not belong to the model");
        }
    }
}

void store_model_spec(Checkpoint& checkpoint, const ModelSpec& spec, const std::string& prefix)
{
    const auto cfg = KeyValueConfig::parse(spec.to_text());
    for (const auto& key : cfg.keys()) checkpoint.manifest.set(prefix + key, cfg.get(key));
}

ModelSpec stored_model_spec(const Checkpoint& checkpoint, const std::string& prefix)
{
    KeyValueConfig cfg;
    for (const auto& key : checkpoint.manifest.keys()) {
        if (key.rfind(prefix, 0) == 0) cfg.set(key.substr(prefix.size()), checkpoint.manifest.get(key));
    }
    if (cfg.keys().empty()) throw DataError("checkpoint has no model spec under '" + prefix + "'");
    cfg.reject_unknown(model_spec_keys());
    return parse_model_spec(cfg);
}

void store_model(Checkpoint& checkpoint, const ConvSeq2Seq<float>& model)
{
    checkpoint.manifest.set("format_version", std::to_string(kCheckpointFormatVersion));
    store_model_spec(checkpoint, model.spec());
    store_parameters(checkpoint, model.parameters(), "model.");
}

std::unique_ptr<ConvSeq2Seq<float>> load_model(const Checkpoint& checkpoint, bool with_output_head)
{
    auto model = std::make_unique<ConvSeq2Seq<float>>(stored_model_spec(checkpoint), with_output_head);
    restore_parameters(checkpoint, model->parameters(), "model.");
    return model;
}

}  // namespace storygen
