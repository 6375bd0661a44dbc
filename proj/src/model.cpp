#include "simclip/model.hpp"

#include <cmath>
#include <cstring>
#include <set>

#include "byteio.hpp"
#include "simclip/errors.hpp"
#include "simclip/hash.hpp"

namespace simclip::model {

using nlohmann::json;

std::string_view to_string(FusionVariant v) {
    switch (v) {
        case FusionVariant::cat: return "cat";
        case FusionVariant::cat_diff: return "cat-diff";
        case FusionVariant::cat_prod: return "cat-prod";
        case FusionVariant::full: return "full";
    }
    return "full";
}

FusionVariant parse_variant(std::string_view text) {
    for (auto v : kAllVariants)
        if (to_string(v) == text) return v;
    throw ConfigError("unknown fusion variant '" + std::string(text) + "' (expected cat, cat-diff, cat-prod or full)");
}

std::string_view table_label(FusionVariant v) {
    switch (v) {
        case FusionVariant::cat: return "Concat";
        case FusionVariant::cat_diff: return "Concat + Difference";
        case FusionVariant::cat_prod: return "Concat + Product";
        case FusionVariant::full: return "Full architecture";
    }
    return "Full architecture";
}

std::size_t block_count(FusionVariant v) {
    switch (v) {
        case FusionVariant::cat: return 2;
        case FusionVariant::cat_diff:
        case FusionVariant::cat_prod: return 3;
        case FusionVariant::full: return 4;
    }
    return 4;
}

void ModelConfig::validate() const {
    if (input_dim == 0) throw ConfigError("model input_dim must be positive");
    if (hidden_dim == 0) throw ConfigError("model hidden_dim must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("model dropout_rate must lie in [0, 1)");
    if (tasks.empty()) throw ConfigError("model needs at least one task");
    std::set<std::string> names;
    for (const auto& t : tasks) {
        t.validate();
        if (!names.insert(t.name).second) throw ConfigError("duplicate task name '" + t.name + "'");
    }
}

void to_json(json& j, const ModelConfig& c) {
    j = json{{"input_dim", c.input_dim},     {"proj_dim", c.proj_dim},          {"hidden_dim", c.hidden_dim},
             {"dropout_rate", c.dropout_rate}, {"variant", to_string(c.variant)}, {"tasks", c.tasks}};
}

void from_json(const json& j, ModelConfig& c) {
    c.input_dim = j.at("input_dim").get<std::size_t>();
    c.proj_dim = j.at("proj_dim").get<std::size_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.tasks = j.at("tasks").get<std::vector<data::TaskSchema>>();
}

std::vector<nd::Tensor> ModelParams::all() const {
    std::vector<nd::Tensor> out{projection.weight, projection.bias};
    for (const auto& head : heads) {
        for (const auto& block : head.blocks) {
            out.insert(out.end(), {block.norm.gain, block.norm.shift, block.linear.weight, block.linear.bias});
        }
        out.insert(out.end(), {head.out.weight, head.out.bias});
    }
    return out;
}

// Batches ------------------------------------------------------------------

Batch make_batch(std::span<const data::EmbeddingRecord> records) {
    if (records.empty()) throw DimensionError("cannot build an empty batch");
    const std::size_t dim = records.front().text.size();
    std::vector<double> text, image;
    text.reserve(records.size() * dim);
    image.reserve(records.size() * dim);
    for (const auto& r : records) {
        if (r.text.size() != dim || r.image.size() != dim) {
            throw DimensionError("record '" + r.id + "' does not match batch width " + std::to_string(dim));
        }
        text.insert(text.end(), r.text.begin(), r.text.end());
        image.insert(image.end(), r.image.begin(), r.image.end());
    }
    return {nd::Tensor::constant({records.size(), dim}, std::move(text)),
            nd::Tensor::constant({records.size(), dim}, std::move(image))};
}

Batch make_batch(const data::Dataset& dataset, std::span<const std::size_t> rows) {
    if (rows.empty()) throw DimensionError("cannot build an empty batch");
    const std::size_t dim = dataset.dim;
    std::vector<double> text(rows.size() * dim), image(rows.size() * dim);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto src = static_cast<std::ptrdiff_t>(rows[r] * dim);
        const auto dst = static_cast<std::ptrdiff_t>(r * dim);
        std::copy_n(dataset.text.begin() + src, dim, text.begin() + dst);
        std::copy_n(dataset.image.begin() + src, dim, image.begin() + dst);
    }
    return {nd::Tensor::constant({rows.size(), dim}, std::move(text)),
            nd::Tensor::constant({rows.size(), dim}, std::move(image))};
}

// Network ------------------------------------------------------------------

nd::Tensor fuse(nd::Tape& tape, const nd::Tensor& text, const nd::Tensor& image, FusionVariant variant) {
    if (text.shape() != image.shape()) {
        throw DimensionError("fuse: text " + nd::shape_string(text.shape()) + " vs image " +
                             nd::shape_string(image.shape()));
    }
    std::vector<nd::Tensor> parts{text, image};
    if (variant == FusionVariant::cat_diff || variant == FusionVariant::full) {
        parts.push_back(nd::abs_diff(tape, text, image));
    }
    if (variant == FusionVariant::cat_prod || variant == FusionVariant::full) {
        parts.push_back(nd::hadamard(tape, text, image));
    }
    return nd::concat_features(tape, parts);
}

namespace {

Affine init_affine(Rng& rng, std::size_t in, std::size_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(in * out);
    for (auto& x : w) x = rng.uniform(-bound, bound);
    return {nd::Tensor::parameter({in, out}, std::move(w)), nd::Tensor::zeros({out}, true)};
}

Norm init_norm(std::size_t width) {
    return {nd::Tensor::parameter({width}, std::vector<double>(width, 1.0)), nd::Tensor::zeros({width}, true)};
}

}  // namespace

SimClip::SimClip(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng{seed, streams::init};
    const std::size_t p = config_.projection_width();
    const std::size_t fused = fused_width(config_.variant, p);
    const std::size_t hidden = config_.hidden_dim;
    params_.projection = init_affine(rng, config_.input_dim, p);
    for (const auto& task : config_.tasks) {
        Head head;
        head.blocks[0] = {init_norm(fused), init_affine(rng, fused, hidden)};
        head.blocks[1] = {init_norm(hidden), init_affine(rng, hidden, hidden)};
        head.out = init_affine(rng, hidden, task.outputs());
        params_.heads.push_back(std::move(head));
    }
}

SimClip::SimClip(ModelConfig config, ModelParams params) : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
    const SimClip reference(config_, 0);
    const auto expected = reference.params_.all();
    const auto actual = params_.all();
    if (params_.heads.size() != config_.tasks.size() || expected.size() != actual.size()) {
        throw DimensionError("parameter set does not match the model config");
    }
    for (std::size_t k = 0; k < expected.size(); ++k) {
        if (expected[k].shape() != actual[k].shape()) {
            throw DimensionError("parameter " + std::to_string(k) + " has shape " + nd::shape_string(actual[k].shape()) +
                                 ", config implies " + nd::shape_string(expected[k].shape()));
        }
    }
}

nd::Tensor SimClip::project(nd::Tape& tape, const nd::Tensor& raw) const {
    if (raw.shape().size() != 2 || raw.cols() != config_.input_dim) {
        throw DimensionError("project: expected [b," + std::to_string(config_.input_dim) + "] input, got " +
                             nd::shape_string(raw.shape()));
    }
    const auto activated = nd::gelu(tape, raw);
    const auto projected = nd::affine(tape, activated, params_.projection.weight, params_.projection.bias);
    return nd::l2_normalize(tape, projected);
}

nd::Tensor SimClip::classify(nd::Tape& tape, const nd::Tensor& fused, std::size_t task, nd::Mode mode,
                             Rng& rng) const {
    const std::size_t expected = fused_width(config_.variant, config_.projection_width());
    if (fused.shape().size() != 2 || fused.cols() != expected) {
        throw DimensionError("classify: expected fused width " + std::to_string(expected) + ", got " +
                             nd::shape_string(fused.shape()));
    }
    const Head& head = params_.heads.at(task);
    nd::Tensor x = fused;
    for (const auto& block : head.blocks) {
        x = nd::layer_norm(tape, x, block.norm.gain, block.norm.shift);
        x = nd::affine(tape, x, block.linear.weight, block.linear.bias);
        x = nd::dropout(tape, x, config_.dropout_rate, mode, rng);
        x = nd::gelu(tape, x);
    }
    return nd::affine(tape, x, head.out.weight, head.out.bias);
}

HeadOutput SimClip::forward(nd::Tape& tape, const Batch& batch, nd::Mode mode, Rng& rng) const {
    const auto text = project(tape, batch.text);
    const auto image = project(tape, batch.image);
    const auto fused = fuse(tape, text, image, config_.variant);
    HeadOutput out;
    out.reserve(config_.tasks.size());
    for (std::size_t t = 0; t < config_.tasks.size(); ++t) out.push_back(classify(tape, fused, t, mode, rng));
    return out;
}

std::size_t SimClip::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : params_.all()) n += t.size();
    return n;
}

std::string SimClip::parameter_hash() const {
    Sha256 h;
    std::vector<unsigned char> bytes;
    for (const auto& t : params_.all()) {
        bytes.clear();
        for (double v : t.data()) io::put_f64(bytes, v);
        h.update(bytes);
    }
    return h.hex();
}

// Checkpoints --------------------------------------------------------------

void save_checkpoint(const SimClip& model, const std::filesystem::path& path) {
    std::vector<unsigned char> bytes;
    io::put_bytes(bytes, kCheckpointMagic, 4);
    io::put_le<std::uint32_t>(bytes, kCheckpointVersion);
    const std::string config = json(model.config()).dump();
    io::put_le<std::uint64_t>(bytes, config.size());
    io::put_bytes(bytes, config.data(), config.size());
    const auto params = model.params().all();
    io::put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(params.size()));
    for (const auto& t : params) {
        io::put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(t.shape().size()));
        for (std::size_t extent : t.shape()) io::put_le<std::uint64_t>(bytes, extent);
        for (double v : t.data()) io::put_f64(bytes, v);
    }
    io::write_file_atomic(path, bytes);
}

SimClip load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    std::size_t pos = 0;
    auto need = [&](std::size_t n, const char* what) {
        if (bytes.size() - pos < n) {
            throw CorruptionError(path.string() + ": truncated checkpoint " + what, bytes.size());
        }
    };
    need(8, "header");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError(path.string() + ": not an SCMP checkpoint");
    const auto version = io::get_le<std::uint32_t>(bytes.data() + 4);
    if (version != kCheckpointVersion) throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    pos = 8;
    need(8, "config length");
    const auto config_len = io::get_le<std::uint64_t>(bytes.data() + pos);
    pos += 8;
    need(config_len, "config");
    ModelConfig config;
    try {
        config = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                             bytes.begin() + static_cast<std::ptrdiff_t>(pos + config_len))
                     .get<ModelConfig>();
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": bad checkpoint config: " + e.what());
    }
    pos += config_len;

    SimClip model(config, 0);
    auto params = model.params().all();
    need(4, "blob count");
    const auto blobs = io::get_le<std::uint32_t>(bytes.data() + pos);
    pos += 4;
    if (blobs != params.size()) {
        throw FormatError(path.string() + ": checkpoint holds " + std::to_string(blobs) + " blobs, config implies " +
                          std::to_string(params.size()));
    }
    for (auto& t : params) {
        need(4, "blob rank");
        const auto rank = io::get_le<std::uint32_t>(bytes.data() + pos);
        pos += 4;
        nd::Shape shape(rank);
        need(8ull * rank, "blob shape");
        for (auto& extent : shape) {
            extent = io::get_le<std::uint64_t>(bytes.data() + pos);
            pos += 8;
        }
        if (shape != t.shape()) {
            throw FormatError(path.string() + ": blob shape " + nd::shape_string(shape) + " does not match " +
                              nd::shape_string(t.shape()));
        }
        need(8 * t.size(), "blob values");
        auto dst = t.mutable_data();
        for (auto& v : dst) {
            v = io::get_f64(bytes.data() + pos);
            if (!std::isfinite(v)) throw CorruptionError(path.string() + ": non-finite parameter", pos);
            pos += 8;
        }
    }
    if (pos != bytes.size()) throw CorruptionError(path.string() + ": trailing bytes in checkpoint", pos);
    return model;
}

}  // namespace simclip::model
