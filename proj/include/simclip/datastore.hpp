#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace simclip::data {

namespace fs = std::filesystem;

// SCEB1 embedding container ------------------------------------------------

inline constexpr char kEmbeddingMagic[4] = {'S', 'C', 'E', 'B'};
inline constexpr std::uint32_t kEmbeddingVersion = 1;
inline constexpr std::size_t kEmbeddingHeaderBytes = 4 + 4 + 4 + 8;

/// One meme: paired text and image embeddings from the frozen encoder.
struct EmbeddingRecord {
    std::string id;
    std::vector<float> text;
    std::vector<float> image;

    bool operator==(const EmbeddingRecord&) const = default;
};

/// Bytes one record occupies in an SCEB1 file.
std::uint64_t record_bytes(std::size_t id_len, std::uint32_t dim);

/// Streams records out of an SCEB1 file in file order.
class EmbeddingReader {
public:
    explicit EmbeddingReader(const fs::path& path);

    std::uint32_t dim() const noexcept { return dim_; }
    std::uint64_t count() const noexcept { return count_; }

    /// Next record, or nullopt after the last one. A file shorter than its
    /// header promises raises CorruptionError with the failing offset.
    std::optional<EmbeddingRecord> next();

private:
    void read_exact(void* dst, std::size_t n, const char* what);

    std::ifstream in_;
    fs::path path_;
    std::uint32_t dim_ = 0;
    std::uint64_t count_ = 0;
    std::uint64_t consumed_ = 0;
    std::uint64_t offset_ = 0;
};

std::vector<EmbeddingRecord> read_embeddings(const fs::path& path);

/// Validates every record first, then writes to a sibling temp file, fsyncs it
/// and renames it over `path`. Nothing is left behind on validation failure.
void write_embeddings(std::span<const EmbeddingRecord> records, std::uint32_t dim, const fs::path& path);

// Tasks, labels, manifests --------------------------------------------------

enum class TaskKind { multiclass, multilabel };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view text);

struct TaskSchema {
    std::string name;
    TaskKind kind = TaskKind::multiclass;
    std::vector<std::string> classes;  // class names, or label names for multilabel

    std::size_t outputs() const noexcept { return classes.size(); }
    void validate() const;
    bool operator==(const TaskSchema&) const = default;
};

void to_json(nlohmann::json& j, const TaskSchema& t);
void from_json(const nlohmann::json& j, TaskSchema& t);

/// Class index for multiclass tasks, 0/1 vector for multilabel tasks.
using TaskValue = std::variant<std::size_t, std::vector<std::uint8_t>>;

struct LabelRecord {
    std::string id;
    std::map<std::string, TaskValue> tasks;
};

std::vector<LabelRecord> read_labels(const fs::path& path);
void write_labels(std::span<const LabelRecord> labels, const fs::path& path);
std::string label_line(const LabelRecord& label);

struct SplitFiles {
    fs::path embeddings;
    fs::path labels;
};

struct DatasetManifest {
    std::string name;
    std::uint32_t dim = 0;
    std::vector<TaskSchema> tasks;
    std::map<std::string, SplitFiles> splits;  // paths relative to base_dir
    fs::path base_dir;                         // directory of the manifest file

    bool has_split(const std::string& split) const { return splits.count(split) != 0; }
    fs::path resolve(const fs::path& p) const { return p.is_absolute() ? p : base_dir / p; }
    /// Checks tasks and that referenced files exist and agree on dim.
    void validate() const;
};

DatasetManifest load_manifest(const fs::path& path);
void save_manifest(const DatasetManifest& manifest, const fs::path& path);

// Dense in-memory split ----------------------------------------------------

/// Targets of one task over a split.
struct TaskTargets {
    std::vector<std::size_t> classes;  // multiclass: one per record
    std::vector<std::uint8_t> bits;    // multilabel: n * labels, row-major
};

/// A labeled split converted to float64 row-major matrices.
struct Dataset {
    std::vector<std::string> ids;
    std::size_t dim = 0;
    std::vector<double> text;   // n * dim
    std::vector<double> image;  // n * dim
    std::vector<TaskTargets> targets;  // schema order

    std::size_t size() const noexcept { return ids.size(); }
};

/// Joins embeddings with labels. Labels whose id has no embedding and
/// embeddings without labels are both rejected, naming the ids.
Dataset build_dataset(std::span<const EmbeddingRecord> records, std::span<const LabelRecord> labels,
                      std::span<const TaskSchema> tasks);
Dataset load_split(const DatasetManifest& manifest, const std::string& split);

/// Per-class record counts of a multiclass task.
std::vector<std::size_t> class_counts(const Dataset& data, std::size_t task, std::size_t classes);

// Batching -----------------------------------------------------------------

/// Shuffles [0, n) with a generator seeded by (seed, epoch) and cuts it into
/// batches; the last partial batch is kept.
std::vector<std::vector<std::size_t>> deterministic_batches(std::size_t n, std::size_t batch_size,
                                                            std::uint64_t seed, std::uint64_t epoch);
std::vector<std::vector<std::string>> deterministic_batches(std::span<const std::string> ids,
                                                            std::size_t batch_size, std::uint64_t seed,
                                                            std::uint64_t epoch);

// Synthetic data -----------------------------------------------------------

enum class Interaction {
    dot_sign,       // label from <t, i> only
    modality_only,  // label from a text half-space only
};

std::string_view to_string(Interaction kind);
Interaction parse_interaction(std::string_view text);

struct SynthSpec {
    std::size_t n = 2000;
    std::uint32_t dim = 32;
    TaskKind kind = TaskKind::multiclass;
    Interaction interaction = Interaction::dot_sign;
    std::uint64_t seed = 7;
    /// Fraction of records whose score lands above the threshold (label 1).
    double positive_fraction = 0.5;
    double train_fraction = 0.7;
    double val_fraction = 0.15;
};

struct SynthDataset {
    std::vector<EmbeddingRecord> records;
    std::vector<LabelRecord> labels;
    DatasetManifest manifest;  // split files not yet written
    std::map<std::string, std::vector<std::size_t>> split_rows;
};

/// Unit-norm random embedding pairs with labels from a known rule. Multiclass
/// produces one binary task; multilabel produces one task with two labels,
/// the first from the chosen interaction and the second from an image
/// half-space.
SynthDataset synth_dataset(const SynthSpec& spec);

/// Writes train/val/test SCEB1 and label files plus manifest.json into `dir`.
/// Returns the manifest path.
fs::path write_dataset(const SynthDataset& synth, const fs::path& dir);

}  // namespace simclip::data
