#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "simclip/datastore.hpp"
#include "simclip/ndgrad.hpp"
#include "simclip/rng.hpp"

namespace simclip::model {

/// Which blocks of [t, i, |t - i|, t * i] feed the classifier.
enum class FusionVariant { cat, cat_diff, cat_prod, full };

inline constexpr std::array<FusionVariant, 4> kAllVariants = {FusionVariant::cat, FusionVariant::cat_diff,
                                                              FusionVariant::cat_prod, FusionVariant::full};

/// CLI spelling: cat, cat-diff, cat-prod, full.
std::string_view to_string(FusionVariant v);
FusionVariant parse_variant(std::string_view text);
/// Row label used in ablation tables.
std::string_view table_label(FusionVariant v);
/// Number of proj_dim-wide blocks the variant concatenates.
std::size_t block_count(FusionVariant v);
inline std::size_t fused_width(FusionVariant v, std::size_t proj_dim) { return block_count(v) * proj_dim; }

struct ModelConfig {
    std::size_t input_dim = 0;
    std::size_t proj_dim = 0;  // 0 means "same as input_dim"
    std::size_t hidden_dim = 128;
    double dropout_rate = 0.2;
    FusionVariant variant = FusionVariant::full;
    std::vector<data::TaskSchema> tasks;

    std::size_t projection_width() const noexcept { return proj_dim ? proj_dim : input_dim; }
    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct Affine {
    nd::Tensor weight;  // [in, out]
    nd::Tensor bias;    // [out]
};

struct Norm {
    nd::Tensor gain;
    nd::Tensor shift;
};

/// normalization -> linear -> dropout -> GELU
struct ClassifierBlock {
    Norm norm;
    Affine linear;
};

struct Head {
    std::array<ClassifierBlock, 2> blocks;
    Affine out;
};

struct ModelParams {
    Affine projection;  // shared by text and image
    std::vector<Head> heads;

    /// Every trainable tensor in declaration order (checkpoint blob order).
    std::vector<nd::Tensor> all() const;
};

/// Stacked batch of embeddings, float64 [b, input_dim] each.
struct Batch {
    nd::Tensor text;
    nd::Tensor image;
};

Batch make_batch(std::span<const data::EmbeddingRecord> records);
/// Gathers `rows` of a dense split into a batch.
Batch make_batch(const data::Dataset& dataset, std::span<const std::size_t> rows);

/// One logits tensor per task, in schema order.
using HeadOutput = std::vector<nd::Tensor>;

nd::Tensor fuse(nd::Tape& tape, const nd::Tensor& text, const nd::Tensor& image, FusionVariant variant);

class SimClip {
public:
    /// Randomly initialized: affine weights ~ U(+-1/sqrt(fan_in)), biases 0,
    /// norm gains 1 and shifts 0.
    SimClip(ModelConfig config, std::uint64_t seed);
    SimClip(ModelConfig config, ModelParams params);

    const ModelConfig& config() const noexcept { return config_; }
    const ModelParams& params() const noexcept { return params_; }
    ModelParams& params() noexcept { return params_; }

    /// l2_normalize(affine(gelu(raw))) with the shared projection.
    nd::Tensor project(nd::Tape& tape, const nd::Tensor& raw) const;
    nd::Tensor classify(nd::Tape& tape, const nd::Tensor& fused, std::size_t task, nd::Mode mode, Rng& rng) const;
    HeadOutput forward(nd::Tape& tape, const Batch& batch, nd::Mode mode, Rng& rng) const;

    std::size_t parameter_count() const;
    /// SHA-256 over the little-endian bytes of every parameter, hex encoded.
    std::string parameter_hash() const;

private:
    ModelConfig config_;
    ModelParams params_;
};

// Checkpoints: "SCMP", u32 version, u64 config length + JSON config, u32 blob
// count, then per blob u32 rank, u64 extents, float64 values (all LE).
inline constexpr char kCheckpointMagic[4] = {'S', 'C', 'M', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const SimClip& model, const std::filesystem::path& path);
SimClip load_checkpoint(const std::filesystem::path& path);

}  // namespace simclip::model
