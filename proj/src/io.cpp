#include "drgrade/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <random>

#include "json.hpp"

namespace drgrade::io {

std::string to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::kBadMagic: return "bad magic";
    case FormatErrorKind::kVersionMismatch: return "version mismatch";
    case FormatErrorKind::kChecksum: return "checksum failure";
    case FormatErrorKind::kTruncated: return "truncated";
    case FormatErrorKind::kInconsistent: return "inconsistent index";
  }
  return "unknown";
}

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <typename T>
  void uint(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void str32(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size, std::string origin)
      : data_(data), size_(size), origin_(std::move(origin)) {}

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > size_) {
      throw FormatError(FormatErrorKind::kTruncated,
                        origin_ + ": file ends inside " + std::string(what));
    }
  }
  template <typename T>
  T uint(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  float f32(const char* what) { return std::bit_cast<float>(uint<std::uint32_t>(what)); }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string origin_;
};

void check_magic(const std::string& got, const std::array<char, 4>& want, const std::string& origin) {
  if (got != std::string(want.begin(), want.end())) {
    throw FormatError(FormatErrorKind::kBadMagic, origin + ": not a " +
                                                      std::string(want.begin(), want.end()) + " file");
  }
}

void check_version(std::uint32_t v, const std::string& origin) {
  if (v != kFormatVersion) {
    throw FormatError(FormatErrorKind::kVersionMismatch,
                      origin + ": format version " + std::to_string(v) + ", reader supports " +
                          std::to_string(kFormatVersion));
  }
}

void check_footer(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  const std::size_t body = bytes.size() - 4;
  Reader r(bytes.data() + body, 4, origin);
  const auto stored = r.uint<std::uint32_t>("checksum");
  if (stored != crc32_of(bytes.data(), body)) {
    throw FormatError(FormatErrorKind::kChecksum, origin + ": CRC-32 mismatch");
  }
}

struct Header {
  std::string metadata;
  std::vector<std::string> ids;
  std::vector<ContainerReader::IndexEntry> index;
  std::uint64_t payload_start = 0;
  std::uint64_t payload_bytes = 0;
};

// Parses everything up to the payload and checks the index for internal
// consistency. `total` is the full file length when known.
Header parse_header(Reader& r, std::uint64_t total, const std::string& origin) {
  Header h;
  check_magic(r.str(4, "magic"), kContainerMagic, origin);
  check_version(r.uint<std::uint32_t>("version"), origin);
  const auto count = r.uint<std::uint32_t>("entry count");
  const auto meta_len = r.uint<std::uint32_t>("metadata length");
  h.metadata = r.str(meta_len, "metadata");
  // Index entries take at least 25 bytes, which bounds a plausible count.
  h.ids.reserve(std::min<std::uint64_t>(count, total / 25));
  h.index.reserve(std::min<std::uint64_t>(count, total / 25));
  std::uint64_t expected_offset = 0;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto id_len = r.uint<std::uint16_t>("index");
    std::string id = r.str(id_len, "index");
    ContainerReader::IndexEntry ie{};
    const auto kind = r.uint<std::uint8_t>("index");
    const auto rank = r.uint<std::uint8_t>("index");
    if (kind > 2 || rank < 1 || rank > 4) {
      throw FormatError(FormatErrorKind::kInconsistent,
                        origin + ": entry '" + id + "' has invalid kind/rank");
    }
    ie.kind = static_cast<EntryKind>(kind);
    std::uint64_t product = 1;
    for (int d = 0; d < rank; ++d) {
      ie.dims.push_back(r.uint<std::uint32_t>("index"));
      product *= ie.dims.back();
    }
    ie.offset = r.uint<std::uint64_t>("index");
    ie.count = r.uint<std::uint64_t>("index");
    if (ie.count != product || ie.offset != expected_offset || product == 0) {
      throw FormatError(FormatErrorKind::kInconsistent,
                        origin + ": entry '" + id + "' declares " + std::to_string(ie.count) +
                            " values at offset " + std::to_string(ie.offset) +
                            " but its dims/position imply " + std::to_string(product) +
                            " at " + std::to_string(expected_offset));
    }
    if ((ie.kind == EntryKind::kGlobal && rank != 1) || (ie.kind == EntryKind::kFeatureMap && rank != 3)) {
      throw FormatError(FormatErrorKind::kInconsistent, origin + ": entry '" + id + "' rank does not match kind");
    }
    if (ie.count > total / 4) {
      throw FormatError(FormatErrorKind::kTruncated,
                        origin + ": entry '" + id + "' declares more values than the file holds");
    }
    expected_offset += 4 * ie.count;
    h.ids.push_back(std::move(id));
    h.index.push_back(std::move(ie));
  }
  h.payload_start = r.pos();
  h.payload_bytes = expected_offset;
  const std::uint64_t expected_total = h.payload_start + h.payload_bytes + 4;
  if (total < expected_total) {
    throw FormatError(FormatErrorKind::kTruncated,
                      origin + ": " + std::to_string(total) + " bytes, index declares " +
                          std::to_string(expected_total));
  }
  if (total > expected_total) {
    throw FormatError(FormatErrorKind::kInconsistent,
                      origin + ": " + std::to_string(total - expected_total) +
                          " trailing bytes beyond declared payload");
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t Entry::expected_size() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void Entry::validate() const {
  if (id.empty() || id.size() > 0xFFFF) throw ValidationError("container entry: id length must be 1..65535");
  if (dims.empty() || dims.size() > 4) throw ValidationError("container entry '" + id + "': rank must be 1..4");
  if (kind == EntryKind::kGlobal && dims.size() != 1) {
    throw ValidationError("container entry '" + id + "': global embedding must have rank 1");
  }
  if (kind == EntryKind::kFeatureMap && dims.size() != 3) {
    throw ValidationError("container entry '" + id + "': feature map must have rank 3 (C,H,W)");
  }
  for (auto d : dims) {
    if (d == 0) throw ValidationError("container entry '" + id + "': zero dimension");
  }
  if (values.size() != expected_size()) {
    throw ValidationError("container entry '" + id + "': " + std::to_string(values.size()) +
                          " values for dims totalling " + std::to_string(expected_size()));
  }
}

const Entry* Container::find(const std::string& id) const {
  for (const auto& e : entries) {
    if (e.id == id) return &e;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_container(const Container& c) {
  Writer w;
  w.bytes(kContainerMagic.data(), 4);
  w.uint(kFormatVersion);
  w.uint(static_cast<std::uint32_t>(c.entries.size()));
  w.str32(c.metadata);
  std::uint64_t offset = 0;
  std::map<std::string, int> seen;
  for (const auto& e : c.entries) {
    e.validate();
    if (seen[e.id]++) throw ValidationError("container: duplicate id '" + e.id + "'");
    w.uint(static_cast<std::uint16_t>(e.id.size()));
    w.bytes(e.id.data(), e.id.size());
    w.uint(static_cast<std::uint8_t>(e.kind));
    w.uint(static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) w.uint(d);
    w.uint(offset);
    w.uint(static_cast<std::uint64_t>(e.values.size()));
    offset += 4 * e.values.size();
  }
  for (const auto& e : c.entries) {
    for (float v : e.values) w.f32(v);
  }
  auto& buf = w.buffer();
  const std::uint32_t crc = crc32_of(buf.data(), buf.size());
  w.uint(crc);
  return std::move(buf);
}

Container decode_container(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  Reader r(bytes.data(), bytes.size(), origin);
  Header h = parse_header(r, bytes.size(), origin);
  check_footer(bytes, origin);
  Container c;
  c.metadata = std::move(h.metadata);
  c.entries.reserve(h.ids.size());
  std::map<std::string, int> seen;
  for (std::size_t e = 0; e < h.ids.size(); ++e) {
    if (seen[h.ids[e]]++) {
      throw FormatError(FormatErrorKind::kInconsistent, origin + ": duplicate id '" + h.ids[e] + "'");
    }
    Entry entry;
    entry.id = std::move(h.ids[e]);
    entry.kind = h.index[e].kind;
    entry.dims = h.index[e].dims;
    entry.values.resize(h.index[e].count);
    r.seek(h.payload_start + h.index[e].offset);
    for (auto& v : entry.values) v = r.f32("payload");
    c.entries.push_back(std::move(entry));
  }
  return c;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RuntimeFailure("write failed for " + path.string());
}

void write_container(const std::filesystem::path& path, const Container& c) {
  write_file_bytes(path, encode_container(c));
}

Container read_container(const std::filesystem::path& path) {
  return decode_container(read_file_bytes(path), path.string());
}

// ---------------------------------------------------------------------------

ContainerReader::ContainerReader(const std::filesystem::path& path, bool verify_checksum)
    : path_(path), file_(path, std::ios::binary) {
  if (!file_) throw RuntimeFailure("cannot open " + path.string());
  const std::uint64_t total = std::filesystem::file_size(path);
  // The header and index are small; read until the index parses.
  std::vector<std::uint8_t> head;
  std::size_t want = 4096;
  for (;;) {
    head.resize(std::min<std::uint64_t>(want, total));
    file_.seekg(0);
    file_.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
    try {
      Reader r(head.data(), head.size(), path.string());
      Header h = parse_header(r, total, path.string());
      metadata_ = std::move(h.metadata);
      payload_start_ = h.payload_start;
      for (std::size_t e = 0; e < h.ids.size(); ++e) {
        if (!index_.emplace(h.ids[e], std::move(h.index[e])).second) {
          throw FormatError(FormatErrorKind::kInconsistent, path.string() + ": duplicate id '" + h.ids[e] + "'");
        }
        order_.push_back(std::move(h.ids[e]));
      }
      break;
    } catch (const FormatError& e) {
      if (e.kind() != FormatErrorKind::kTruncated || head.size() == total) throw;
      want *= 4;
    }
  }
  if (verify_checksum) check_footer(read_file_bytes(path), path.string());
}

const ContainerReader::IndexEntry& ContainerReader::info(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw ValidationError(path_.string() + ": no entry for image_id '" + id + "'");
  return it->second;
}

Entry ContainerReader::get(const std::string& id) const {
  const IndexEntry& ie = info(id);
  std::vector<std::uint8_t> raw(4 * ie.count);
  file_.clear();
  file_.seekg(static_cast<std::streamoff>(payload_start_ + ie.offset));
  file_.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!file_) throw FormatError(FormatErrorKind::kTruncated, path_.string() + ": short read for '" + id + "'");
  Reader r(raw.data(), raw.size(), path_.string());
  Entry e;
  e.id = id;
  e.kind = ie.kind;
  e.dims = ie.dims;
  e.values.resize(ie.count);
  for (auto& v : e.values) v = r.f32("payload");
  return e;
}

// ---------------------------------------------------------------------------

EmbeddingSource::EmbeddingSource(const std::filesystem::path& path) {
  std::vector<std::filesystem::path> files;
  if (path.extension() == ".json") {
    std::ifstream in(path);
    if (!in) throw RuntimeFailure("cannot open shard list " + path.string());
    nlohmann::json j;
    try {
      in >> j;
      if (j.at("format").get<std::string>() != "gfe-shards") {
        throw ValidationError(path.string() + ": format must be 'gfe-shards'");
      }
      if (j.at("version").get<int>() != 1) {
        throw FormatError(FormatErrorKind::kVersionMismatch, path.string() + ": unsupported shard list version");
      }
      for (const auto& s : j.at("shards")) {
        std::filesystem::path p = s.get<std::string>();
        files.push_back(p.is_absolute() ? p : path.parent_path() / p);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ": " + e.what());
    }
  } else {
    files.push_back(path);
  }
  for (const auto& f : files) {
    shards_.push_back(std::make_unique<ContainerReader>(f));
    for (const auto& id : shards_.back()->ids()) {
      if (!owner_.emplace(id, shards_.size() - 1).second) {
        throw ValidationError(f.string() + ": image_id '" + id + "' appears in more than one shard");
      }
    }
  }
}

bool EmbeddingSource::contains(const std::string& id) const { return owner_.count(id) > 0; }

Entry EmbeddingSource::get(const std::string& id) const {
  auto it = owner_.find(id);
  if (it == owner_.end()) throw ValidationError("no embedding for image_id '" + id + "'");
  return shards_[it->second]->get(id);
}

void write_shard_list(const std::filesystem::path& path, const std::vector<std::string>& shards) {
  nlohmann::json j{{"format", "gfe-shards"}, {"version", 1}, {"shards", shards}};
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

void PromptEmbeddingFile::validate() const {
  if (embeddings.rows() != kNumGrades) {
    throw ValidationError("prompt file: expected exactly 5 rows, got " + std::to_string(embeddings.rows()));
  }
  if (embeddings.cols() < 1) throw ValidationError("prompt file: embedding dim must be >= 1");
  for (int g = 0; g < kNumGrades; ++g) {
    if (!(embeddings.row(g).norm() > 0)) {
      throw ValidationError("prompt file: row " + std::to_string(g) + " has zero norm");
    }
  }
}

std::array<std::string, kNumGrades> default_prompt_texts() {
  const std::array<const char*, kNumGrades> severity = {"no", "mild", "moderate", "severe", "proliferative"};
  std::array<std::string, kNumGrades> texts;
  for (int g = 0; g < kNumGrades; ++g) {
    texts[g] = std::string("a fundus photograph showing ") + severity[g] + " diabetic retinopathy";
  }
  return texts;
}

std::vector<std::uint8_t> encode_prompts(const PromptEmbeddingFile& p) {
  p.validate();
  Writer w;
  w.bytes(kPromptMagic.data(), 4);
  w.uint(kFormatVersion);
  w.uint(static_cast<std::uint32_t>(kNumGrades));
  w.uint(static_cast<std::uint32_t>(p.embeddings.cols()));
  for (const auto& t : p.texts) w.str32(t);
  for (Index g = 0; g < p.embeddings.rows(); ++g)
    for (Index d = 0; d < p.embeddings.cols(); ++d) w.f32(p.embeddings(g, d));
  auto& buf = w.buffer();
  const std::uint32_t crc = crc32_of(buf.data(), buf.size());
  w.uint(crc);
  return std::move(buf);
}

PromptEmbeddingFile decode_prompts(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  Reader r(bytes.data(), bytes.size(), origin);
  check_magic(r.str(4, "magic"), kPromptMagic, origin);
  check_version(r.uint<std::uint32_t>("version"), origin);
  const auto rows = r.uint<std::uint32_t>("row count");
  const auto dim = r.uint<std::uint32_t>("dim");
  if (rows != kNumGrades) {
    throw FormatError(FormatErrorKind::kInconsistent,
                      origin + ": prompt file has " + std::to_string(rows) + " rows, expected 5");
  }
  PromptEmbeddingFile p;
  for (auto& t : p.texts) {
    const auto len = r.uint<std::uint32_t>("prompt text");
    t = r.str(len, "prompt text");
  }
  r.need(4ull * rows * dim + 4, "embeddings");
  if (r.pos() + 4ull * rows * dim + 4 != bytes.size()) {
    throw FormatError(FormatErrorKind::kInconsistent, origin + ": trailing bytes after prompt embeddings");
  }
  check_footer(bytes, origin);
  p.embeddings.resize(rows, dim);
  for (Index g = 0; g < p.embeddings.rows(); ++g)
    for (Index d = 0; d < p.embeddings.cols(); ++d) p.embeddings(g, d) = r.f32("embeddings");
  p.validate();
  return p;
}

void write_prompts(const std::filesystem::path& path, const PromptEmbeddingFile& p) {
  write_file_bytes(path, encode_prompts(p));
}

PromptEmbeddingFile read_prompts(const std::filesystem::path& path) {
  return decode_prompts(read_file_bytes(path), path.string());
}

// ---------------------------------------------------------------------------

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::mt19937_64 seeded(std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

void check_spec(const ClusterSpec& spec) {
  if (spec.dim < 2) throw ValidationError("synth_embeddings: dim must be >= 2");
  if (spec.kind == EntryKind::kFeatureMap && (spec.height < 1 || spec.width < 1)) {
    throw ValidationError("synth_embeddings: feature map height/width must be >= 1");
  }
  if (spec.kind == EntryKind::kTensor) throw ValidationError("synth_embeddings: kind must be global or feature map");
  if (!(spec.separation >= 0) || !(spec.noise >= 0)) {
    throw ValidationError("synth_embeddings: separation and noise must be >= 0");
  }
}

}  // namespace

RowMatrix<double> synth_class_means(const ClusterSpec& spec, std::uint64_t seed) {
  check_spec(spec);
  auto rng = seeded(seed, 0x6d65616e73ull);
  std::normal_distribution<double> normal;
  RowMatrix<double> dirs(kNumGrades, spec.dim);
  for (Index g = 0; g < kNumGrades; ++g) {
    for (Index d = 0; d < dirs.cols(); ++d) dirs(g, d) = normal(rng);
    // Gram-Schmidt while the dimension allows orthogonal directions.
    for (Index k = 0; k < std::min<Index>(g, dirs.cols()); ++k) {
      if (g < dirs.cols()) dirs.row(g) -= dirs.row(g).dot(dirs.row(k)) * dirs.row(k);
    }
    dirs.row(g).normalize();
  }
  return spec.separation * dirs;
}

Container synth_embeddings(const Manifest& manifest, const ClusterSpec& spec, std::uint64_t seed) {
  const RowMatrix<double> means = synth_class_means(spec, seed);
  Container c;
  nlohmann::json meta{{"generator", "synth_embeddings"},
                      {"seed", seed},
                      {"kind", spec.kind == EntryKind::kGlobal ? "global" : "feature_map"},
                      {"dim", spec.dim},
                      {"separation", spec.separation},
                      {"noise", spec.noise}};
  if (spec.kind == EntryKind::kFeatureMap) {
    meta["height"] = spec.height;
    meta["width"] = spec.width;
  }
  c.metadata = meta.dump();
  c.entries.reserve(manifest.size());
  for (const auto& rec : manifest) {
    if (!valid_grade(rec.grade)) throw ValidationError("synth_embeddings: bad grade for '" + rec.image_id + "'");
    auto rng = seeded(seed, fnv1a(rec.image_id));
    std::normal_distribution<double> noise(0.0, spec.noise);
    Entry e;
    e.id = rec.image_id;
    e.kind = spec.kind;
    const auto mean = means.row(rec.grade);
    if (spec.kind == EntryKind::kGlobal) {
      e.dims = {spec.dim};
      e.values.resize(spec.dim);
      for (std::uint32_t d = 0; d < spec.dim; ++d) e.values[d] = static_cast<float>(mean(d) + noise(rng));
    } else {
      // Grade signal modulated by one Gaussian blob per image, so spatial
      // position carries lesion-like structure.
      e.dims = {spec.dim, spec.height, spec.width};
      e.values.resize(static_cast<std::size_t>(spec.dim) * spec.height * spec.width);
      std::uniform_real_distribution<double> pos(0.0, 1.0);
      const double by = pos(rng) * (spec.height - 1), bx = pos(rng) * (spec.width - 1);
      const double radius = std::max(1.0, std::min(spec.height, spec.width) / 3.0);
      std::size_t i = 0;
      for (std::uint32_t ch = 0; ch < spec.dim; ++ch)
        for (std::uint32_t y = 0; y < spec.height; ++y)
          for (std::uint32_t x = 0; x < spec.width; ++x) {
            const double r2 = (y - by) * (y - by) + (x - bx) * (x - bx);
            const double blob = 0.5 + std::exp(-r2 / (2 * radius * radius));
            e.values[i++] = static_cast<float>(mean(ch) * blob + noise(rng));
          }
    }
    c.entries.push_back(std::move(e));
  }
  return c;
}

}  // namespace drgrade::io
