#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "drgrade/data.hpp"
#include "drgrade/errors.hpp"
#include "drgrade/grades.hpp"
#include "drgrade/tensor.hpp"

namespace drgrade::io {

// ---------------------------------------------------------------------------
// Embedding container ("GFE1")
//
// All integers little-endian.
//   magic    "GFE1"
//   u32      version (1)
//   u32      entry count
//   u32      metadata length, then that many bytes of UTF-8 JSON
//   index    per entry: u16 id length, id bytes, u8 kind, u8 rank,
//            u32 dims[rank], u64 payload byte offset, u64 float count
//   payload  float32 values, entries back to back in index order
//   u32      CRC-32 of every preceding byte
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kContainerMagic{'G', 'F', 'E', '1'};
inline constexpr std::array<char, 4> kPromptMagic{'G', 'F', 'P', '1'};
inline constexpr std::uint32_t kFormatVersion = 1;

enum class EntryKind : std::uint8_t {
  kGlobal = 0,      // rank 1: D
  kFeatureMap = 1,  // rank 3: C x H x W
  kTensor = 2,      // rank 1..4: model parameters
};

struct Entry {
  std::string id;
  EntryKind kind = EntryKind::kGlobal;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  std::size_t expected_size() const;
  void validate() const;
};

struct Container {
  std::string metadata;  // free-form JSON text, may be empty
  std::vector<Entry> entries;

  const Entry* find(const std::string& id) const;
};

enum class FormatErrorKind { kBadMagic, kVersionMismatch, kChecksum, kTruncated, kInconsistent };

std::string to_string(FormatErrorKind kind);

/// A container or prompt file failed structural validation.
class FormatError : public RuntimeFailure {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : RuntimeFailure(what + " [" + to_string(kind) + "]"), kind_(kind) {}
  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

/// Index-only view of a container file; entries are read on demand by
/// seeking to their offset.
class ContainerReader {
 public:
  struct IndexEntry {
    EntryKind kind;
    std::vector<std::uint32_t> dims;
    std::uint64_t offset;  // bytes from payload start
    std::uint64_t count;   // float32 values
  };

  /// Parses header and index and checks the declared sizes against the file
  /// length. With verify_checksum the whole file is also CRC-checked.
  explicit ContainerReader(const std::filesystem::path& path, bool verify_checksum = true);

  const std::string& metadata() const { return metadata_; }
  const std::vector<std::string>& ids() const { return order_; }
  bool contains(const std::string& id) const { return index_.count(id) > 0; }
  const IndexEntry& info(const std::string& id) const;
  Entry get(const std::string& id) const;

 private:
  std::filesystem::path path_;
  std::string metadata_;
  std::vector<std::string> order_;
  std::map<std::string, IndexEntry> index_;
  std::uint64_t payload_start_ = 0;
  mutable std::ifstream file_;
};

/// Several containers addressed through one JSON list:
///   {"format": "gfe-shards", "version": 1, "shards": ["a.gfe", ...]}
/// Relative shard paths resolve against the JSON file's directory.
class EmbeddingSource {
 public:
  /// Opens a single .gfe container or a shard list (by .json extension).
  explicit EmbeddingSource(const std::filesystem::path& path);

  bool contains(const std::string& id) const;
  Entry get(const std::string& id) const;
  std::size_t size() const { return owner_.size(); }

 private:
  std::vector<std::unique_ptr<ContainerReader>> shards_;
  std::map<std::string, std::size_t> owner_;
};

void write_shard_list(const std::filesystem::path& path, const std::vector<std::string>& shards);

// ---------------------------------------------------------------------------
// Prompt embeddings ("GFP1")
//
//   magic "GFP1", u32 version, u32 rows (5), u32 dim,
//   per row: u32 text length + UTF-8 text,
//   rows*dim float32 values (row-major), u32 CRC-32.
// ---------------------------------------------------------------------------

struct PromptEmbeddingFile {
  std::array<std::string, kNumGrades> texts;
  RowMatrix<float> embeddings;  // 5 x D

  void validate() const;
};

/// "a fundus photograph showing {no, mild, ...} diabetic retinopathy"
std::array<std::string, kNumGrades> default_prompt_texts();

std::vector<std::uint8_t> encode_prompts(const PromptEmbeddingFile& p);
PromptEmbeddingFile decode_prompts(const std::vector<std::uint8_t>& bytes,
                                   const std::string& origin = "<memory>");
void write_prompts(const std::filesystem::path& path, const PromptEmbeddingFile& p);
PromptEmbeddingFile read_prompts(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Synthetic embeddings
// ---------------------------------------------------------------------------

struct ClusterSpec {
  EntryKind kind = EntryKind::kGlobal;
  std::uint32_t dim = 32;  // global embedding size, or channel count for feature maps
  std::uint32_t height = 4;
  std::uint32_t width = 4;
  // Distance of each grade mean from the origin along its own orthonormal
  // direction; 0 makes every grade share one distribution.
  double separation = 1.0;
  double noise = 0.1;  // per-coordinate Gaussian standard deviation
};

/// Grade means (5 x dim), deterministic in (spec, seed).
RowMatrix<double> synth_class_means(const ClusterSpec& spec, std::uint64_t seed);

/// One entry per manifest record: its grade mean plus Gaussian noise. Each
/// record's noise depends only on (seed, image_id).
Container synth_embeddings(const Manifest& manifest, const ClusterSpec& spec, std::uint64_t seed);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace drgrade::io
