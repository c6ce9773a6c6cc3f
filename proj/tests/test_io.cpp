#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "drgrade/io.hpp"
#include "drgrade/models.hpp"
#include "json.hpp"

using namespace drgrade;
using Eigen::Index;
using namespace drgrade::io;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("drgrade_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path operator/(const std::string& f) const { return path / f; }
};

float random_float_bits(std::mt19937_64& rng) {
  const auto bits = static_cast<std::uint32_t>(rng());
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

Container random_container(std::mt19937_64& rng) {
  Container c;
  if (rng() % 2) c.metadata = nlohmann::json{{"seed", rng() % 1000}}.dump();
  const int n = int(rng() % 7);
  for (int k = 0; k < n; ++k) {
    Entry e;
    e.id = "e" + std::to_string(k) + std::string(rng() % 5, char('a' + k));
    e.kind = EntryKind(rng() % 3);
    if (e.kind == EntryKind::kGlobal) {
      e.dims = {std::uint32_t(1 + rng() % 40)};
    } else if (e.kind == EntryKind::kFeatureMap) {
      e.dims = {std::uint32_t(1 + rng() % 8), std::uint32_t(1 + rng() % 5), std::uint32_t(1 + rng() % 5)};
    } else {
      e.dims.resize(1 + rng() % 4);
      for (auto& d : e.dims) d = std::uint32_t(1 + rng() % 4);
    }
    e.values.resize(e.expected_size());
    for (auto& v : e.values) v = random_float_bits(rng);
    c.entries.push_back(std::move(e));
  }
  return c;
}

bool bitwise_equal(const Container& a, const Container& b) {
  if (a.metadata != b.metadata || a.entries.size() != b.entries.size()) return false;
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    const auto &x = a.entries[i], &y = b.entries[i];
    if (x.id != y.id || x.kind != y.kind || x.dims != y.dims || x.values.size() != y.values.size()) return false;
    if (!x.values.empty() && std::memcmp(x.values.data(), y.values.data(), x.values.size() * 4) != 0) return false;
  }
  return true;
}

FormatErrorKind error_kind(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_container(bytes);
  } catch (const FormatError& e) {
    return e.kind();
  }
  FAIL("decode succeeded");
  return FormatErrorKind::kInconsistent;
}

Container sample_container() {
  Container c;
  c.metadata = R"({"encoder":"test"})";
  Entry fm;
  fm.id = "img_0001";
  fm.kind = EntryKind::kFeatureMap;
  fm.dims = {16, 4, 4};
  fm.values.resize(256);
  for (std::size_t i = 0; i < fm.values.size(); ++i) fm.values[i] = float(i) * 0.5f - 3.0f;
  c.entries.push_back(fm);
  for (int k = 0; k < 2; ++k) {
    fm.id = "img_000" + std::to_string(k + 2);
    for (auto& v : fm.values) v += 1.0f;
    c.entries.push_back(fm);
  }
  return c;
}

Manifest toy_manifest(int per_class) {
  Manifest m;
  for (int g = 0; g < kNumGrades; ++g)
    for (int k = 0; k < per_class; ++k) {
      ImageRecord r;
      r.image_id = "s" + std::to_string(g) + "_" + std::to_string(k);
      r.grade = g;
      m.push_back(r);
    }
  return m;
}

}  // namespace

TEST_CASE("empty container") {
  const auto bytes = encode_container(Container{});
  CHECK(bytes.size() == 4 + 4 + 4 + 4 + 4);
  CHECK(std::memcmp(bytes.data(), "GFE1", 4) == 0);
  const Container back = decode_container(bytes);
  CHECK(back.entries.empty());
  CHECK(back.metadata.empty());
}

TEST_CASE("feature map container round trip") {
  TempDir dir("io_roundtrip");
  const Container c = sample_container();
  write_container(dir / "a.gfe", c);
  const Container back = read_container(dir / "a.gfe");
  CHECK(bitwise_equal(c, back));
  CHECK(back.find("img_0002")->dims == std::vector<std::uint32_t>{16, 4, 4});
  CHECK(back.find("missing") == nullptr);
  CHECK(read_file_bytes(dir / "a.gfe") == encode_container(c));
}

TEST_CASE("1000 random containers round trip bitwise") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const Container c = random_container(rng);
    const auto bytes = encode_container(c);
    const Container back = decode_container(bytes);
    REQUIRE(bitwise_equal(c, back));
    REQUIRE(encode_container(back) == bytes);
  }
}

TEST_CASE("corruption classes are detected") {
  const auto good = encode_container(sample_container());
  auto bad = good;
  bad[0] = 'X';
  CHECK(error_kind(bad) == FormatErrorKind::kBadMagic);

  bad = good;
  bad[4] = 2;
  CHECK(error_kind(bad) == FormatErrorKind::kVersionMismatch);

  bad = good;
  bad[good.size() - 100] ^= 0x01;
  CHECK(error_kind(bad) == FormatErrorKind::kChecksum);

  bad = good;
  bad.back() ^= 0x80;
  CHECK(error_kind(bad) == FormatErrorKind::kChecksum);

  bad = good;
  bad.push_back(0);
  CHECK(error_kind(bad) == FormatErrorKind::kInconsistent);

  for (std::size_t len = 0; len < good.size(); len += (len < 200 ? 1 : 37)) {
    std::vector<std::uint8_t> cut(good.begin(), good.begin() + std::ptrdiff_t(len));
    INFO("length " << len);
    const auto kind = error_kind(cut);
    if (len >= 4) CHECK(kind == FormatErrorKind::kTruncated);
  }
}

TEST_CASE("every single-bit flip is rejected") {
  std::mt19937_64 rng(2);
  Container c;
  Entry e;
  e.id = "x";
  e.dims = {3};
  e.values = {1.0f, -2.0f, 0.25f};
  c.entries.push_back(e);
  const auto good = encode_container(c);
  for (std::size_t i = 0; i < good.size(); ++i) {
    for (int bit = 0; bit < 8; ++bit) {
      auto bad = good;
      bad[i] ^= std::uint8_t(1u << bit);
      CHECK_THROWS_AS(decode_container(bad), FormatError);
    }
  }
}

TEST_CASE("entries are validated on encode") {
  Container c;
  Entry e;
  e.id = "a";
  e.kind = EntryKind::kFeatureMap;
  e.dims = {4};
  e.values.resize(4);
  c.entries.push_back(e);
  CHECK_THROWS(encode_container(c));
  c.entries[0].kind = EntryKind::kGlobal;
  c.entries[0].values.resize(3);
  CHECK_THROWS(encode_container(c));
  c.entries[0].values.resize(4);
  c.entries.push_back(c.entries[0]);
  CHECK_THROWS(encode_container(c));
}

TEST_CASE("reader gives random access") {
  TempDir dir("io_reader");
  std::mt19937_64 rng(3);
  Container c = random_container(rng);
  while (c.entries.size() < 3) c = random_container(rng);
  write_container(dir / "r.gfe", c);
  ContainerReader reader(dir / "r.gfe");
  CHECK(reader.metadata() == c.metadata);
  REQUIRE(reader.ids().size() == c.entries.size());
  for (auto it = c.entries.rbegin(); it != c.entries.rend(); ++it) {
    CHECK(reader.contains(it->id));
    Container one;
    one.entries.push_back(reader.get(it->id));
    Container expect;
    expect.entries.push_back(*it);
    CHECK(bitwise_equal(one, expect));
  }
  CHECK_THROWS(reader.get("nope"));

  auto bytes = read_file_bytes(dir / "r.gfe");
  bytes[bytes.size() - 5] ^= 0x10;
  write_file_bytes(dir / "bad.gfe", bytes);
  CHECK_THROWS_AS(ContainerReader(dir / "bad.gfe"), FormatError);
  CHECK_NOTHROW(ContainerReader(dir / "bad.gfe", false));
  bytes.resize(bytes.size() - 9);
  write_file_bytes(dir / "short.gfe", bytes);
  try {
    ContainerReader r(dir / "short.gfe", false);
    FAIL("truncated file accepted");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatErrorKind::kTruncated);
  }
}

TEST_CASE("shard lists") {
  TempDir dir("io_shards");
  const Manifest m = toy_manifest(4);
  const Manifest first(m.begin(), m.begin() + 10), second(m.begin() + 10, m.end());
  ClusterSpec spec;
  write_container(dir / "a.gfe", synth_embeddings(first, spec, 5));
  write_container(dir / "b.gfe", synth_embeddings(second, spec, 5));
  write_shard_list(dir / "all.json", {"a.gfe", "b.gfe"});
  const auto j = nlohmann::json::parse(std::ifstream(dir / "all.json"));
  CHECK(j["format"] == "gfe-shards");
  CHECK(j["version"] == 1);

  EmbeddingSource src(dir / "all.json");
  CHECK(src.size() == 20);
  const Container whole = synth_embeddings(m, spec, 5);
  for (const auto& e : whole.entries) {
    REQUIRE(src.contains(e.id));
    CHECK(src.get(e.id).values == e.values);
  }
  CHECK(EmbeddingSource(dir / "a.gfe").size() == 10);

  write_shard_list(dir / "dup.json", {"a.gfe", "a.gfe"});
  CHECK_THROWS(EmbeddingSource(dir / "dup.json"));
  std::ofstream(dir / "bad.json") << R"({"format":"other","version":1,"shards":[]})";
  CHECK_THROWS(EmbeddingSource(dir / "bad.json"));
}

TEST_CASE("prompt file round trip and validation") {
  TempDir dir("io_prompts");
  PromptEmbeddingFile p;
  p.texts = default_prompt_texts();
  CHECK(p.texts[0] == "a fundus photograph showing no diabetic retinopathy");
  CHECK(p.texts[4] == "a fundus photograph showing proliferative diabetic retinopathy");
  p.embeddings = RowMatrix<float>::Random(5, 12);
  write_prompts(dir / "p.gfp", p);
  const auto back = read_prompts(dir / "p.gfp");
  CHECK(back.texts == p.texts);
  CHECK(back.embeddings == p.embeddings);

  auto bytes = encode_prompts(p);
  CHECK(std::memcmp(bytes.data(), "GFP1", 4) == 0);
  auto bad = bytes;
  bad[20] ^= 1;
  CHECK_THROWS_AS(decode_prompts(bad), FormatError);
  bad = bytes;
  bad[8] = 4;
  CHECK_THROWS_AS(decode_prompts(bad), FormatError);
  bad.assign(bytes.begin(), bytes.end() - 3);
  CHECK_THROWS_AS(decode_prompts(bad), FormatError);

  PromptEmbeddingFile wrong = p;
  wrong.embeddings = RowMatrix<float>::Random(4, 12);
  CHECK_THROWS(encode_prompts(wrong));
}

TEST_CASE("synthetic embeddings are deterministic per image") {
  const Manifest m = toy_manifest(6);
  ClusterSpec spec;
  const Container a = synth_embeddings(m, spec, 7);
  CHECK(bitwise_equal(a, synth_embeddings(m, spec, 7)));
  CHECK(!bitwise_equal(a, synth_embeddings(m, spec, 8)));
  Manifest reversed(m.rbegin(), m.rend());
  const Container b = synth_embeddings(reversed, spec, 7);
  for (const auto& e : a.entries) CHECK(b.find(e.id)->values == e.values);

  spec.kind = EntryKind::kFeatureMap;
  spec.dim = 8;
  const Container fm = synth_embeddings(m, spec, 7);
  CHECK(fm.entries[0].dims == std::vector<std::uint32_t>{8, 4, 4});
  CHECK(decode_container(encode_container(fm)).entries.size() == m.size());

  const auto means = synth_class_means(ClusterSpec{}, 3);
  const RowMatrix<double> gram = means * means.transpose();
  CHECK((gram - RowMatrix<double>::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("separated clusters are classified perfectly by their means") {
  const Manifest m = toy_manifest(100);
  ClusterSpec spec;
  spec.separation = 1.0;
  spec.noise = 0.05;
  const Container c = synth_embeddings(m, spec, 11);
  PromptBank<double> bank;
  bank.embeddings = synth_class_means(spec, 11);
  int correct = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& v = c.entries[i].values;
    Vector<double> x(v.size());
    for (std::size_t d = 0; d < v.size(); ++d) x(Index(d)) = v[d];
    correct += zero_shot_classify(x, bank).grade == m[i].grade;
  }
  CHECK(correct == 500);
}

TEST_CASE("zero separation gives chance accuracy") {
  const Manifest m = toy_manifest(400);
  ClusterSpec spec;
  spec.separation = 0.0;
  const Container c = synth_embeddings(m, spec, 12);
  PromptBank<double> bank;
  ClusterSpec unit = spec;
  unit.separation = 1.0;
  bank.embeddings = synth_class_means(unit, 12);
  int correct = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& v = c.entries[i].values;
    Vector<double> x(v.size());
    for (std::size_t d = 0; d < v.size(); ++d) x(Index(d)) = v[d];
    correct += zero_shot_classify(x, bank).grade == m[i].grade;
  }
  const double acc = correct / 2000.0;
  CHECK(acc > 0.15);
  CHECK(acc < 0.25);
}
