#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "drgrade/grades.hpp"

namespace drgrade {

/// One labelled fundus photograph.
struct ImageRecord {
  std::string image_id;
  std::string filepath;
  int grade = 0;
  std::optional<std::string> patient_id;
  std::string source;

  bool operator==(const ImageRecord&) const = default;
};

using Manifest = std::vector<ImageRecord>;
using GradeHistogram = std::array<std::size_t, kNumGrades>;

GradeHistogram histogram(const Manifest& manifest);

// Manifest CSV: header `image_id,filepath,grade,patient_id,source`, UTF-8,
// LF line endings, patient_id may be empty. Fields may be double-quoted.
inline constexpr const char* kManifestHeader = "image_id,filepath,grade,patient_id,source";

Manifest parse_manifest(std::istream& in, const std::string& origin = "<stream>");
Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(std::ostream& out, const Manifest& manifest);
void save_manifest(const std::filesystem::path& path, const Manifest& manifest);

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct SplitSpec {
  std::array<double, 3> ratios{0.70, 0.15, 0.15};  // train, val, test
  std::uint64_t seed = 0;
  bool group_by_patient = true;

  void validate() const;
};

struct SplitResult {
  Manifest train;
  Manifest val;
  Manifest test;
  // True when patient ids were present and used to keep patients whole.
  bool grouped = false;
  std::string note;
  // Largest |count - ratio * class size| over splits and grades.
  double max_deviation = 0.0;

  const Manifest& part(int i) const { return i == 0 ? train : (i == 1 ? val : test); }
};

/// Per-grade stratified split. Without patient grouping every split's
/// per-grade count is within 1 of ratio * class size. With grouping,
/// patients never straddle splits and the deviation is reported.
SplitResult stratified_split(const Manifest& manifest, const SplitSpec& spec);

nlohmann::json split_summary(const SplitResult& result, const SplitSpec& spec);

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

struct ResampleSpec {
  GradeHistogram target_counts{445, 200, 200, 180, 180};
  std::uint64_t seed = 0;
  bool with_replacement = true;
};

/// Draws exactly target_counts[g] records of each grade g. Classes larger
/// than their target are undersampled without replacement; smaller ones keep
/// every record and top up with draws with replacement.
Manifest resample(const Manifest& records, const ResampleSpec& spec);

nlohmann::json resample_summary(const Manifest& input, const Manifest& output,
                                const ResampleSpec& spec);

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved RGB

  RgbImage() = default;
  RgbImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(3 * w * h), fill) {}

  std::uint8_t& at(int x, int y, int ch) {
    return pixels[static_cast<std::size_t>(3 * (y * width + x) + ch)];
  }
  std::uint8_t at(int x, int y, int ch) const {
    return pixels[static_cast<std::size_t>(3 * (y * width + x) + ch)];
  }
  void validate() const;

  bool operator==(const RgbImage&) const = default;
};

RgbImage read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);

struct AugmentParams {
  double hflip_prob = 0.0;
  double vflip_prob = 0.0;
  double rotation_max_deg = 0.0;
  double brightness = 0.0;
  double contrast = 0.0;
  double saturation = 0.0;
  double hue = 0.0;  // max shift as a fraction of a full turn, <= 0.5
  double translate_frac = 0.0;
  double scale_min = 1.0;
  double scale_max = 1.0;
  double erase_prob = 0.0;
  double erase_area_min = 0.02;
  double erase_area_max = 0.20;
  double erase_aspect_min = 0.3;
  double erase_aspect_max = 3.3;

  static AugmentParams identity() { return {}; }
  static AugmentParams standard();
  static AugmentParams minority();
  void validate() const;
};

struct AugmentationConfig {
  AugmentParams standard = AugmentParams::standard();
  AugmentParams minority = AugmentParams::minority();
  // Mild, Severe and Proliferative use the minority parameters.
  std::array<bool, kNumGrades> minority_grades{false, true, false, true, true};

  const AugmentParams& for_grade(int grade) const;
  static AugmentationConfig uniform(const AugmentParams& params);
};

struct EraseRect {
  int x = 0, y = 0, width = 0, height = 0;
  std::array<std::uint8_t, 3> fill{};
};

/// What augment() actually applied.
struct AugmentTrace {
  bool hflip = false;
  bool vflip = false;
  double angle_deg = 0.0;
  double translate_x = 0.0;  // pixels
  double translate_y = 0.0;
  double scale = 1.0;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue_shift = 0.0;
  std::optional<EraseRect> erased;
};

/// Flips, rotation + affine (black fill), colour jitter, random erasing, in
/// that order. Deterministic for a given seed.
RgbImage augment(const RgbImage& image, int grade, const AugmentationConfig& config,
                 std::uint64_t seed, AugmentTrace* trace = nullptr);

}  // namespace drgrade
