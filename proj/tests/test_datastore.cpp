#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <set>
#include <vector>

#include "simclip/datastore.hpp"
#include "simclip/errors.hpp"
#include "simclip/hash.hpp"
#include "simclip/rng.hpp"
#include "support.hpp"

using namespace simclip;
using namespace simclip::data;
namespace fs = std::filesystem;

namespace {

std::vector<EmbeddingRecord> random_records(std::size_t n, std::uint32_t dim, std::uint64_t seed) {
    Rng rng{seed};
    std::vector<EmbeddingRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        EmbeddingRecord r;
        r.id = "rec-" + std::to_string(i) + (i % 2 ? "-\xc3\xa9" : "");
        for (std::uint32_t k = 0; k < dim; ++k) {
            r.text.push_back(static_cast<float>(rng.normal()));
            r.image.push_back(static_cast<float>(rng.normal()));
        }
        out.push_back(std::move(r));
    }
    return out;
}

void write_raw(const fs::path& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> header(std::uint32_t dim, std::uint64_t count) {
    std::vector<unsigned char> b{'S', 'C', 'E', 'B', 1, 0, 0, 0};
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(dim >> (8 * i)));
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<unsigned char>(count >> (8 * i)));
    return b;
}

TaskSchema binary_task() { return {"label", TaskKind::multiclass, {"negative", "positive"}}; }

}  // namespace

TEST_CASE("embedding round trip is the identity") {
    const auto dir = simclip::testing::scratch_dir("roundtrip");
    const auto records = random_records(25, 7, 1);
    write_embeddings(records, 7, dir / "a.sceb");
    CHECK(read_embeddings(dir / "a.sceb") == records);

    write_embeddings(records, 7, dir / "b.sceb");
    CHECK(sha256_file(dir / "a.sceb") == sha256_file(dir / "b.sceb"));

    write_embeddings(std::vector<EmbeddingRecord>{}, 7, dir / "empty.sceb");
    CHECK(read_embeddings(dir / "empty.sceb").empty());
    CHECK(fs::file_size(dir / "empty.sceb") == kEmbeddingHeaderBytes);
}

TEST_CASE("file size follows the layout arithmetic") {
    const auto dir = simclip::testing::scratch_dir("size");
    std::vector<EmbeddingRecord> records;
    for (const char* id : {"a", "bb", "ccc"}) records.push_back({id, std::vector<float>(4, 0.5f), std::vector<float>(4, -1.0f)});
    write_embeddings(records, 4, dir / "x.sceb");
    CHECK(fs::file_size(dir / "x.sceb") == 20 + (2 + 1 + 32) + (2 + 2 + 32) + (2 + 3 + 32));
    CHECK(record_bytes(3, 4) == 2 + 3 + 2 * 4 * 4);
}

TEST_CASE("invalid writes leave nothing behind") {
    const auto dir = simclip::testing::scratch_dir("badwrite");
    auto records = random_records(3, 4, 2);
    records[1].image.pop_back();
    CHECK_THROWS_AS(write_embeddings(records, 4, dir / "x.sceb"), DimensionError);
    auto dup = random_records(3, 4, 2);
    dup[2].id = dup[0].id;
    try {
        write_embeddings(dup, 4, dir / "x.sceb");
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find(dup[0].id) != std::string::npos);
    }
    CHECK(fs::is_empty(dir));
}

TEST_CASE("truncated files report the failing byte offset") {
    const auto dir = simclip::testing::scratch_dir("truncate");
    const auto records = random_records(3, 4, 3);
    write_embeddings(records, 4, dir / "x.sceb");
    const auto full = fs::file_size(dir / "x.sceb");
    for (std::uintmax_t cut : {full - 1, full - 20, std::uintmax_t{25}, std::uintmax_t{21}}) {
        fs::copy_file(dir / "x.sceb", dir / "t.sceb", fs::copy_options::overwrite_existing);
        fs::resize_file(dir / "t.sceb", cut);
        try {
            read_embeddings(dir / "t.sceb");
            FAIL("expected CorruptionError");
        } catch (const CorruptionError& e) {
            CHECK(e.offset() <= cut);
            CHECK(std::string(e.what()).find("offset") != std::string::npos);
        }
    }
}

TEST_CASE("header and body disagreements are rejected") {
    const auto dir = simclip::testing::scratch_dir("header");
    SECTION("dim 768 header with 512-float records") {
        auto bytes = header(768, 1);
        bytes.insert(bytes.end(), {1, 0, 'a'});
        bytes.insert(bytes.end(), 2 * 512 * 4, 0);
        write_raw(dir / "x.sceb", bytes);
        CHECK_THROWS_AS(read_embeddings(dir / "x.sceb"), CorruptionError);
    }
    SECTION("bad magic") {
        auto bytes = header(4, 0);
        bytes[0] = 'X';
        write_raw(dir / "x.sceb", bytes);
        CHECK_THROWS_AS(read_embeddings(dir / "x.sceb"), FormatError);
    }
    SECTION("unknown version") {
        auto bytes = header(4, 0);
        bytes[4] = 2;
        write_raw(dir / "x.sceb", bytes);
        CHECK_THROWS_AS(read_embeddings(dir / "x.sceb"), FormatError);
    }
    SECTION("trailing bytes") {
        auto bytes = header(4, 0);
        bytes.push_back(0);
        write_raw(dir / "x.sceb", bytes);
        CHECK_THROWS_AS(read_embeddings(dir / "x.sceb"), CorruptionError);
    }
    SECTION("non-finite value") {
        auto bytes = header(1, 1);
        bytes.insert(bytes.end(), {1, 0, 'a', 0, 0, 0xc0, 0x7f, 0, 0, 0, 0});
        write_raw(dir / "x.sceb", bytes);
        CHECK_THROWS_AS(read_embeddings(dir / "x.sceb"), CorruptionError);
    }
}

TEST_CASE("labels round trip through JSON lines") {
    const auto dir = simclip::testing::scratch_dir("labels");
    std::vector<LabelRecord> labels{{"a", {{"label", std::size_t{1}}, {"tags", std::vector<std::uint8_t>{1, 0, 1}}}},
                                    {"b", {{"label", std::size_t{0}}, {"tags", std::vector<std::uint8_t>{0, 0, 0}}}}};
    write_labels(labels, dir / "l.jsonl");
    const auto back = read_labels(dir / "l.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[0].id == "a");
    CHECK(std::get<std::size_t>(back[0].tasks.at("label")) == 1);
    CHECK(std::get<std::vector<std::uint8_t>>(back[0].tasks.at("tags")) == std::vector<std::uint8_t>{1, 0, 1});
    CHECK(label_line(labels[0]) == R"({"id":"a","tasks":{"label":1,"tags":[1,0,1]}})");

    {
        std::ofstream out(dir / "bad.jsonl");
        out << "{\"id\": \"a\", \"tasks\": {\"label\": 1}}\nnot json\n";
    }
    CHECK_THROWS_AS(read_labels(dir / "bad.jsonl"), FormatError);
}

TEST_CASE("dataset join rejects orphans and out-of-range labels") {
    const auto records = random_records(3, 2, 4);
    const std::vector<TaskSchema> tasks{binary_task()};
    std::vector<LabelRecord> labels;
    for (const auto& r : records) labels.push_back({r.id, {{"label", std::size_t{1}}}});

    const auto ds = build_dataset(records, labels, tasks);
    CHECK(ds.size() == 3);
    CHECK(ds.text.size() == 6);
    CHECK(ds.text[0] == static_cast<double>(records[0].text[0]));

    auto orphan = labels;
    orphan.push_back({"ghost-id", {{"label", std::size_t{0}}}});
    try {
        build_dataset(records, orphan, tasks);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("ghost-id") != std::string::npos);
    }

    auto missing = labels;
    missing.pop_back();
    CHECK_THROWS_AS(build_dataset(records, missing, tasks), DataError);

    auto range = labels;
    range[0].tasks["label"] = std::size_t{2};
    CHECK_THROWS_AS(build_dataset(records, range, tasks), DataError);
}

TEST_CASE("manifest round trip and validation") {
    const auto dir = simclip::testing::scratch_dir("manifest");
    SynthSpec spec;
    spec.n = 40;
    spec.dim = 4;
    const auto path = write_dataset(synth_dataset(spec), dir);
    const auto m = load_manifest(path);
    CHECK(m.dim == 4);
    CHECK(m.has_split("train"));
    CHECK(m.has_split("val"));
    CHECK(m.has_split("test"));
    const auto raw = nlohmann::json::parse(std::ifstream(path));
    for (const char* key : {"name", "dim", "tasks", "splits"}) CHECK(raw.contains(key));

    auto bad = raw;
    bad["dim"] = 5;
    {
        std::ofstream out(dir / "bad.json");
        out << bad.dump();
    }
    CHECK_THROWS_AS(load_manifest(dir / "bad.json"), DimensionError);

    auto no_file = raw;
    no_file["splits"]["train"]["embeddings"] = "nowhere.sceb";
    {
        std::ofstream out(dir / "missing.json");
        out << no_file.dump();
    }
    CHECK_THROWS_AS(load_manifest(dir / "missing.json"), DataError);
}

TEST_CASE("deterministic batches") {
    SECTION("partition with the last partial batch kept") {
        const auto batches = deterministic_batches(103, 16, 5, 0);
        CHECK(batches.size() == 7);
        CHECK(batches.back().size() == 7);
        std::multiset<std::size_t> seen;
        for (const auto& b : batches) seen.insert(b.begin(), b.end());
        CHECK(seen.size() == 103);
        for (std::size_t i = 0; i < 103; ++i) CHECK(seen.count(i) == 1);
    }
    SECTION("batch size at least n gives one batch") {
        CHECK(deterministic_batches(10, 64, 1, 0).size() == 1);
        CHECK(deterministic_batches(10, 10, 1, 0).front().size() == 10);
    }
    SECTION("same seed and epoch repeat, epochs differ") {
        CHECK(deterministic_batches(50, 16, 3, 2) == deterministic_batches(50, 16, 3, 2));
        CHECK(deterministic_batches(16, 16, 3, 0) != deterministic_batches(16, 16, 3, 1));
        CHECK(deterministic_batches(50, 16, 3, 0) != deterministic_batches(50, 16, 4, 0));
    }
    SECTION("id overload matches the index overload") {
        std::vector<std::string> ids;
        for (int i = 0; i < 20; ++i) ids.push_back("id" + std::to_string(i));
        const auto by_index = deterministic_batches(20, 8, 9, 1);
        const auto by_id = deterministic_batches(ids, 8, 9, 1);
        REQUIRE(by_id.size() == by_index.size());
        for (std::size_t b = 0; b < by_id.size(); ++b)
            for (std::size_t k = 0; k < by_id[b].size(); ++k) CHECK(by_id[b][k] == ids[by_index[b][k]]);
    }
    SECTION("zero batch size is rejected") {
        CHECK_THROWS_AS(deterministic_batches(10, 0, 1, 0), ConfigError);
    }
}

TEST_CASE("synthetic dot_sign data") {
    SynthSpec spec;
    spec.n = 501;
    spec.dim = 16;
    for (std::uint64_t seed : {1, 2, 3}) {
        spec.seed = seed;
        const auto synth = synth_dataset(spec);
        REQUIRE(synth.records.size() == 501);
        std::size_t positives = 0;
        std::vector<double> pos_dots, neg_dots;
        for (std::size_t r = 0; r < synth.records.size(); ++r) {
            const auto& rec = synth.records[r];
            double nt = 0.0, ni = 0.0, dot = 0.0;
            for (std::size_t k = 0; k < 16; ++k) {
                nt += double(rec.text[k]) * rec.text[k];
                ni += double(rec.image[k]) * rec.image[k];
                dot += double(rec.text[k]) * rec.image[k];
            }
            CHECK(std::abs(std::sqrt(nt) - 1.0) <= 1e-6);
            CHECK(std::abs(std::sqrt(ni) - 1.0) <= 1e-6);
            const auto y = std::get<std::size_t>(synth.labels[r].tasks.at("label"));
            positives += y;
            (y ? pos_dots : neg_dots).push_back(dot);
        }
        CHECK(std::abs(static_cast<double>(positives) - 250.5) <= 1.0);
        // Labels are a threshold on the dot product.
        CHECK(*std::min_element(pos_dots.begin(), pos_dots.end()) >= *std::max_element(neg_dots.begin(), neg_dots.end()));
    }
}

TEST_CASE("synthetic data is reproducible and split into files") {
    const auto dir = simclip::testing::scratch_dir("synth");
    SynthSpec spec;
    spec.n = 100;
    spec.dim = 6;
    const auto a = write_dataset(synth_dataset(spec), dir / "a");
    const auto b = write_dataset(synth_dataset(spec), dir / "b");
    for (const char* f : {"train.sceb", "val.sceb", "test.sceb", "train.labels.jsonl"}) {
        CHECK(sha256_file(a.parent_path() / f) == sha256_file(b.parent_path() / f));
    }
    const auto m = load_manifest(a);
    const auto train = load_split(m, "train");
    const auto val = load_split(m, "val");
    const auto test = load_split(m, "test");
    CHECK(train.size() + val.size() + test.size() == 100);
    CHECK(train.size() == 70);
}

TEST_CASE("modality_only and multilabel synthetic tasks") {
    SynthSpec spec;
    spec.n = 200;
    spec.dim = 8;
    spec.interaction = Interaction::modality_only;
    spec.positive_fraction = 0.1;
    const auto imbalanced = synth_dataset(spec);
    std::size_t positives = 0;
    for (const auto& l : imbalanced.labels) positives += std::get<std::size_t>(l.tasks.at("label"));
    CHECK(positives == 20);

    spec.kind = TaskKind::multilabel;
    spec.interaction = Interaction::dot_sign;
    spec.positive_fraction = 0.5;
    const auto ml = synth_dataset(spec);
    REQUIRE(ml.manifest.tasks.size() == 1);
    CHECK(ml.manifest.tasks[0].kind == TaskKind::multilabel);
    CHECK(ml.manifest.tasks[0].outputs() == 2);
    CHECK(std::get<std::vector<std::uint8_t>>(ml.labels[0].tasks.at("tags")).size() == 2);
}
