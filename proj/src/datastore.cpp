#include "simclip/datastore.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "byteio.hpp"
#include "simclip/errors.hpp"
#include "simclip/rng.hpp"

namespace simclip::data {

using nlohmann::json;

namespace {

std::string list_ids(const std::vector<std::string>& ids) {
    std::string out;
    const std::size_t shown = std::min<std::size_t>(ids.size(), 10);
    for (std::size_t i = 0; i < shown; ++i) out += (i ? ", " : "") + ids[i];
    if (ids.size() > shown) out += ", ... (" + std::to_string(ids.size()) + " total)";
    return out;
}

}  // namespace

// SCEB1 --------------------------------------------------------------------

std::uint64_t record_bytes(std::size_t id_len, std::uint32_t dim) {
    return 2 + id_len + 2ull * dim * sizeof(float);
}

EmbeddingReader::EmbeddingReader(const fs::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw FormatError("cannot open embedding file " + path.string());
    unsigned char header[kEmbeddingHeaderBytes];
    read_exact(header, sizeof(header), "header");
    if (std::memcmp(header, kEmbeddingMagic, 4) != 0) {
        throw FormatError(path.string() + ": bad magic, not an SCEB file");
    }
    const auto version = io::get_le<std::uint32_t>(header + 4);
    if (version != kEmbeddingVersion) {
        throw FormatError(path.string() + ": unsupported SCEB version " + std::to_string(version));
    }
    dim_ = io::get_le<std::uint32_t>(header + 8);
    count_ = io::get_le<std::uint64_t>(header + 12);
    if (dim_ == 0) throw FormatError(path.string() + ": embedding dim must be positive");
}

void EmbeddingReader::read_exact(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    const auto got = static_cast<std::uint64_t>(in_.gcount());
    if (got != n) {
        throw CorruptionError(path_.string() + ": truncated " + what + " (wanted " + std::to_string(n) +
                                  " bytes, found " + std::to_string(got) + ")",
                              offset_ + got);
    }
    offset_ += n;
}

std::optional<EmbeddingRecord> EmbeddingReader::next() {
    if (consumed_ == count_) {
        if (in_.peek() != std::char_traits<char>::eof()) {
            throw CorruptionError(path_.string() + ": trailing bytes after " + std::to_string(count_) + " records",
                                  offset_);
        }
        return std::nullopt;
    }
    unsigned char len_bytes[2];
    read_exact(len_bytes, 2, "record id length");
    const auto id_len = io::get_le<std::uint16_t>(len_bytes);

    EmbeddingRecord rec;
    rec.id.resize(id_len);
    if (id_len) read_exact(rec.id.data(), id_len, "record id");

    std::vector<unsigned char> buf(std::size_t{dim_} * sizeof(float));
    auto read_vector = [&](std::vector<float>& dst, const char* what) {
        const std::uint64_t start = offset_;
        read_exact(buf.data(), buf.size(), what);
        dst.resize(dim_);
        for (std::uint32_t k = 0; k < dim_; ++k) {
            dst[k] = io::get_f32(buf.data() + 4 * k);
            if (!std::isfinite(dst[k])) {
                throw CorruptionError(path_.string() + ": non-finite value in record '" + rec.id + "'",
                                      start + 4ull * k);
            }
        }
    };
    read_vector(rec.text, "text embedding");
    read_vector(rec.image, "image embedding");
    ++consumed_;
    return rec;
}

std::vector<EmbeddingRecord> read_embeddings(const fs::path& path) {
    EmbeddingReader reader(path);
    std::vector<EmbeddingRecord> out;
    out.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(reader.count(), 1u << 20)));
    std::set<std::string> seen;
    while (auto rec = reader.next()) {
        if (!seen.insert(rec->id).second) throw DataError(path.string() + ": duplicate id '" + rec->id + "'");
        out.push_back(std::move(*rec));
    }
    return out;
}

void write_embeddings(std::span<const EmbeddingRecord> records, std::uint32_t dim, const fs::path& path) {
    if (dim == 0) throw DimensionError("embedding dim must be positive");
    std::set<std::string_view> seen;
    std::uint64_t total = kEmbeddingHeaderBytes;
    for (const auto& r : records) {
        if (r.text.size() != dim || r.image.size() != dim) {
            throw DimensionError("record '" + r.id + "' has widths " + std::to_string(r.text.size()) + "/" +
                                 std::to_string(r.image.size()) + ", file dim is " + std::to_string(dim));
        }
        if (r.id.size() > 0xFFFF) throw DataError("record id longer than 65535 bytes: '" + r.id.substr(0, 32) + "...'");
        if (!seen.insert(r.id).second) throw DataError("duplicate id '" + r.id + "'");
        total += record_bytes(r.id.size(), dim);
    }

    std::vector<unsigned char> bytes;
    bytes.reserve(static_cast<std::size_t>(total));
    io::put_bytes(bytes, kEmbeddingMagic, 4);
    io::put_le<std::uint32_t>(bytes, kEmbeddingVersion);
    io::put_le<std::uint32_t>(bytes, dim);
    io::put_le<std::uint64_t>(bytes, records.size());
    for (const auto& r : records) {
        io::put_le<std::uint16_t>(bytes, static_cast<std::uint16_t>(r.id.size()));
        io::put_bytes(bytes, r.id.data(), r.id.size());
        for (float v : r.text) io::put_f32(bytes, v);
        for (float v : r.image) io::put_f32(bytes, v);
    }
    io::write_file_atomic(path, bytes);
}

// Tasks --------------------------------------------------------------------

std::string_view to_string(TaskKind kind) {
    return kind == TaskKind::multiclass ? "multiclass" : "multilabel";
}

TaskKind parse_task_kind(std::string_view text) {
    if (text == "multiclass") return TaskKind::multiclass;
    if (text == "multilabel") return TaskKind::multilabel;
    throw FormatError("unknown task kind '" + std::string(text) + "'");
}

void TaskSchema::validate() const {
    if (name.empty()) throw ConfigError("task name must not be empty");
    if (kind == TaskKind::multiclass && classes.size() < 2) {
        throw ConfigError("multiclass task '" + name + "' needs at least 2 classes");
    }
    if (kind == TaskKind::multilabel && classes.empty()) {
        throw ConfigError("multilabel task '" + name + "' needs at least 1 label");
    }
}

void to_json(json& j, const TaskSchema& t) {
    j = json{{"name", t.name}, {"kind", to_string(t.kind)}, {"classes", t.classes}};
}

void from_json(const json& j, TaskSchema& t) {
    t.name = j.at("name").get<std::string>();
    t.kind = parse_task_kind(j.at("kind").get<std::string>());
    t.classes = j.at("classes").get<std::vector<std::string>>();
}

// Labels -------------------------------------------------------------------

std::string label_line(const LabelRecord& label) {
    json tasks = json::object();
    for (const auto& [name, value] : label.tasks) {
        if (const auto* cls = std::get_if<std::size_t>(&value)) {
            tasks[name] = *cls;
        } else {
            json bits = json::array();
            for (auto b : std::get<std::vector<std::uint8_t>>(value)) bits.push_back(static_cast<int>(b));
            tasks[name] = std::move(bits);
        }
    }
    return json{{"id", label.id}, {"tasks", std::move(tasks)}}.dump();
}

std::vector<LabelRecord> read_labels(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open label file " + path.string());
    std::vector<LabelRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(line_no);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError(where + ": " + e.what());
        }
        if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("tasks") ||
            !j["tasks"].is_object()) {
            throw FormatError(where + ": expected {\"id\": str, \"tasks\": {...}}");
        }
        LabelRecord rec;
        rec.id = j["id"].get<std::string>();
        for (const auto& [name, value] : j["tasks"].items()) {
            if (value.is_number_integer()) {
                if (value.get<long long>() < 0) throw DataError(where + ": negative class index for task '" + name + "'");
                rec.tasks[name] = value.get<std::size_t>();
            } else if (value.is_array()) {
                std::vector<std::uint8_t> bits;
                for (const auto& b : value) {
                    if (!b.is_number_integer() || (b.get<long long>() != 0 && b.get<long long>() != 1)) {
                        throw DataError(where + ": multilabel target for task '" + name + "' must be 0/1");
                    }
                    bits.push_back(static_cast<std::uint8_t>(b.get<int>()));
                }
                rec.tasks[name] = std::move(bits);
            } else {
                throw FormatError(where + ": task '" + name + "' must be an integer or a 0/1 array");
            }
        }
        out.push_back(std::move(rec));
    }
    return out;
}

void write_labels(std::span<const LabelRecord> labels, const fs::path& path) {
    std::vector<unsigned char> bytes;
    for (const auto& label : labels) {
        const std::string line = label_line(label) + "\n";
        io::put_bytes(bytes, line.data(), line.size());
    }
    io::write_file_atomic(path, bytes);
}

// Manifest -----------------------------------------------------------------

void DatasetManifest::validate() const {
    if (dim == 0) throw FormatError("manifest '" + name + "': dim must be positive");
    if (tasks.empty()) throw FormatError("manifest '" + name + "': at least one task required");
    std::set<std::string> names;
    for (const auto& t : tasks) {
        try {
            t.validate();
        } catch (const ConfigError& e) {
            throw FormatError("manifest '" + name + "': " + e.what());
        }
        if (!names.insert(t.name).second) throw FormatError("manifest '" + name + "': duplicate task '" + t.name + "'");
    }
    if (!has_split("train")) throw FormatError("manifest '" + name + "': no train split");
    for (const auto& [split, files] : splits) {
        for (const auto& f : {files.embeddings, files.labels}) {
            if (!fs::exists(resolve(f))) {
                throw DataError("manifest '" + name + "': split '" + split + "' references missing file " +
                                resolve(f).string());
            }
        }
        EmbeddingReader header(resolve(files.embeddings));
        if (header.dim() != dim) {
            throw DimensionError("split '" + split + "' embeddings have dim " + std::to_string(header.dim()) +
                                 ", manifest declares " + std::to_string(dim));
        }
    }
}

DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open manifest " + path.string());
    DatasetManifest m;
    try {
        const json j = json::parse(in);
        m.name = j.at("name").get<std::string>();
        m.dim = j.at("dim").get<std::uint32_t>();
        m.tasks = j.at("tasks").get<std::vector<TaskSchema>>();
        for (const auto& [split, files] : j.at("splits").items()) {
            m.splits[split] = SplitFiles{files.at("embeddings").get<std::string>(), files.at("labels").get<std::string>()};
        }
    } catch (const json::exception& e) {
        throw FormatError("manifest " + path.string() + ": " + e.what());
    }
    m.base_dir = path.parent_path();
    m.validate();
    return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
    json splits = json::object();
    for (const auto& [split, files] : manifest.splits) {
        splits[split] = json{{"embeddings", files.embeddings.generic_string()}, {"labels", files.labels.generic_string()}};
    }
    const json j{{"name", manifest.name}, {"dim", manifest.dim}, {"tasks", manifest.tasks}, {"splits", splits}};
    const std::string text = j.dump(2) + "\n";
    io::write_file_atomic(path, std::vector<unsigned char>(text.begin(), text.end()));
}

// Dense splits -------------------------------------------------------------

Dataset build_dataset(std::span<const EmbeddingRecord> records, std::span<const LabelRecord> labels,
                      std::span<const TaskSchema> tasks) {
    std::unordered_map<std::string_view, const LabelRecord*> by_id;
    std::unordered_map<std::string_view, std::size_t> record_index;
    for (std::size_t i = 0; i < records.size(); ++i) record_index.emplace(records[i].id, i);

    std::vector<std::string> orphans;
    for (const auto& l : labels) {
        if (!record_index.count(l.id)) orphans.push_back(l.id);
        if (!by_id.emplace(l.id, &l).second) throw DataError("duplicate label for id '" + l.id + "'");
    }
    if (!orphans.empty()) throw DataError("labels without embeddings: " + list_ids(orphans));

    std::vector<std::string> unlabeled;
    for (const auto& r : records)
        if (!by_id.count(r.id)) unlabeled.push_back(r.id);
    if (!unlabeled.empty()) throw DataError("embeddings without labels: " + list_ids(unlabeled));

    Dataset out;
    out.dim = records.empty() ? 0 : records.front().text.size();
    out.targets.resize(tasks.size());
    out.ids.reserve(records.size());
    out.text.reserve(records.size() * out.dim);
    out.image.reserve(records.size() * out.dim);

    for (const auto& r : records) {
        if (r.text.size() != out.dim || r.image.size() != out.dim) {
            throw DimensionError("record '" + r.id + "' width differs from the split's dim " + std::to_string(out.dim));
        }
        out.ids.push_back(r.id);
        out.text.insert(out.text.end(), r.text.begin(), r.text.end());
        out.image.insert(out.image.end(), r.image.begin(), r.image.end());

        const LabelRecord& label = *by_id.at(r.id);
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            const auto& schema = tasks[t];
            const auto it = label.tasks.find(schema.name);
            if (it == label.tasks.end()) throw DataError("record '" + r.id + "' has no value for task '" + schema.name + "'");
            if (schema.kind == TaskKind::multiclass) {
                const auto* cls = std::get_if<std::size_t>(&it->second);
                if (!cls || *cls >= schema.outputs()) {
                    throw DataError("record '" + r.id + "': task '" + schema.name + "' needs a class index in [0, " +
                                    std::to_string(schema.outputs()) + ")");
                }
                out.targets[t].classes.push_back(*cls);
            } else {
                const auto* bits = std::get_if<std::vector<std::uint8_t>>(&it->second);
                if (!bits || bits->size() != schema.outputs()) {
                    throw DataError("record '" + r.id + "': task '" + schema.name + "' needs " +
                                    std::to_string(schema.outputs()) + " binary labels");
                }
                out.targets[t].bits.insert(out.targets[t].bits.end(), bits->begin(), bits->end());
            }
        }
    }
    return out;
}

Dataset load_split(const DatasetManifest& manifest, const std::string& split) {
    const auto it = manifest.splits.find(split);
    if (it == manifest.splits.end()) throw DataError("manifest '" + manifest.name + "' has no split '" + split + "'");
    const auto records = read_embeddings(manifest.resolve(it->second.embeddings));
    const auto labels = read_labels(manifest.resolve(it->second.labels));
    Dataset d = build_dataset(records, labels, manifest.tasks);
    if (!records.empty() && d.dim != manifest.dim) {
        throw DimensionError("split '" + split + "' has dim " + std::to_string(d.dim) + ", manifest declares " +
                             std::to_string(manifest.dim));
    }
    d.dim = manifest.dim;
    return d;
}

std::vector<std::size_t> class_counts(const Dataset& data, std::size_t task, std::size_t classes) {
    std::vector<std::size_t> counts(classes, 0);
    for (std::size_t c : data.targets.at(task).classes) ++counts.at(c);
    return counts;
}

// Batching -----------------------------------------------------------------

std::vector<std::vector<std::size_t>> deterministic_batches(std::size_t n, std::size_t batch_size,
                                                            std::uint64_t seed, std::uint64_t epoch) {
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng{seed, streams::shuffle, epoch};
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t stop = std::min(n, start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(stop));
    }
    return batches;
}

std::vector<std::vector<std::string>> deterministic_batches(std::span<const std::string> ids,
                                                            std::size_t batch_size, std::uint64_t seed,
                                                            std::uint64_t epoch) {
    std::vector<std::vector<std::string>> out;
    for (const auto& batch : deterministic_batches(ids.size(), batch_size, seed, epoch)) {
        auto& named = out.emplace_back();
        named.reserve(batch.size());
        for (std::size_t i : batch) named.push_back(ids[i]);
    }
    return out;
}

// Synthetic data -----------------------------------------------------------

std::string_view to_string(Interaction kind) {
    return kind == Interaction::dot_sign ? "dot_sign" : "modality_only";
}

Interaction parse_interaction(std::string_view text) {
    if (text == "dot_sign") return Interaction::dot_sign;
    if (text == "modality_only") return Interaction::modality_only;
    throw ConfigError("unknown interaction '" + std::string(text) + "' (expected dot_sign or modality_only)");
}

namespace {

std::vector<double> random_unit(Rng& rng, std::uint32_t dim) {
    std::vector<double> v(dim);
    double sq = 0.0;
    do {
        sq = 0.0;
        for (auto& x : v) {
            x = rng.normal();
            sq += x * x;
        }
    } while (sq == 0.0);
    const double norm = std::sqrt(sq);
    for (auto& x : v) x /= norm;
    return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}

/// Label 1 for the round(n * fraction) highest scores, ties broken by index.
std::vector<std::uint8_t> top_fraction(const std::vector<double>& scores, double fraction) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    const auto positives = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(scores.size())));
    std::vector<std::uint8_t> labels(scores.size(), 0);
    for (std::size_t k = 0; k < positives; ++k) labels[order[k]] = 1;
    return labels;
}

std::vector<float> to_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }

}  // namespace

SynthDataset synth_dataset(const SynthSpec& spec) {
    if (spec.n < 4) throw ConfigError("synthetic dataset needs n >= 4");
    if (spec.dim < 2) throw ConfigError("synthetic dataset needs dim >= 2");
    if (!(spec.positive_fraction > 0.0 && spec.positive_fraction < 1.0)) {
        throw ConfigError("positive fraction must lie in (0, 1)");
    }
    if (!(spec.train_fraction > 0.0) || !(spec.val_fraction >= 0.0) ||
        spec.train_fraction + spec.val_fraction > 1.0) {
        throw ConfigError("split fractions must be positive and sum to at most 1");
    }

    Rng rng{spec.seed, streams::synth};
    const auto text_direction = random_unit(rng, spec.dim);
    const auto image_direction = random_unit(rng, spec.dim);

    SynthDataset out;
    std::vector<double> primary(spec.n), secondary(spec.n);
    out.records.reserve(spec.n);
    for (std::size_t r = 0; r < spec.n; ++r) {
        const auto t = random_unit(rng, spec.dim);
        const auto i = random_unit(rng, spec.dim);
        primary[r] = spec.interaction == Interaction::dot_sign ? dot(t, i) : dot(t, text_direction);
        secondary[r] = dot(i, image_direction);
        char id[32];
        std::snprintf(id, sizeof(id), "synth-%06zu", r);
        out.records.push_back(EmbeddingRecord{id, to_float(t), to_float(i)});
    }

    const auto primary_labels = top_fraction(primary, spec.positive_fraction);
    const auto secondary_labels = top_fraction(secondary, spec.positive_fraction);

    TaskSchema task;
    if (spec.kind == TaskKind::multiclass) {
        task = TaskSchema{"label", TaskKind::multiclass, {"negative", "positive"}};
    } else {
        task = TaskSchema{"tags", TaskKind::multilabel, {std::string(to_string(spec.interaction)), "image_side"}};
    }
    for (std::size_t r = 0; r < spec.n; ++r) {
        LabelRecord label{out.records[r].id, {}};
        if (spec.kind == TaskKind::multiclass) {
            label.tasks[task.name] = std::size_t{primary_labels[r]};
        } else {
            label.tasks[task.name] = std::vector<std::uint8_t>{primary_labels[r], secondary_labels[r]};
        }
        out.labels.push_back(std::move(label));
    }

    const auto n_train = static_cast<std::size_t>(std::floor(spec.train_fraction * static_cast<double>(spec.n)));
    const auto n_val = static_cast<std::size_t>(std::floor(spec.val_fraction * static_cast<double>(spec.n)));
    auto rows = [](std::size_t begin, std::size_t end) {
        std::vector<std::size_t> v(end - begin);
        std::iota(v.begin(), v.end(), begin);
        return v;
    };
    out.split_rows["train"] = rows(0, n_train);
    if (n_val > 0) out.split_rows["val"] = rows(n_train, n_train + n_val);
    if (n_train + n_val < spec.n) out.split_rows["test"] = rows(n_train + n_val, spec.n);

    std::ostringstream name;
    name << "synth-" << to_string(spec.interaction) << "-" << to_string(spec.kind) << "-n" << spec.n << "-d" << spec.dim
         << "-s" << spec.seed;
    out.manifest.name = name.str();
    out.manifest.dim = spec.dim;
    out.manifest.tasks = {task};
    for (const auto& [split, _] : out.split_rows) {
        out.manifest.splits[split] = SplitFiles{split + ".sceb", split + ".labels.jsonl"};
    }
    return out;
}

fs::path write_dataset(const SynthDataset& synth, const fs::path& dir) {
    fs::create_directories(dir);
    DatasetManifest manifest = synth.manifest;
    manifest.base_dir = dir;
    for (const auto& [split, rows] : synth.split_rows) {
        std::vector<EmbeddingRecord> records;
        std::vector<LabelRecord> labels;
        for (std::size_t r : rows) {
            records.push_back(synth.records[r]);
            labels.push_back(synth.labels[r]);
        }
        const auto& files = manifest.splits.at(split);
        write_embeddings(records, manifest.dim, dir / files.embeddings);
        write_labels(labels, dir / files.labels);
    }
    const fs::path path = dir / "manifest.json";
    save_manifest(manifest, path);
    return path;
}

}  // namespace simclip::data
