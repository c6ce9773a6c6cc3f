#include "drgrade/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include "drgrade/csv.hpp"
#include "drgrade/errors.hpp"

namespace drgrade {

GradeHistogram histogram(const Manifest& manifest) {
  GradeHistogram h{};
  for (const auto& r : manifest) ++h[static_cast<std::size_t>(r.grade)];
  return h;
}

// ---------------------------------------------------------------------------
// Manifest CSV
// ---------------------------------------------------------------------------

Manifest parse_manifest(std::istream& in, const std::string& origin) {
  const csv::Table table = csv::read(in, origin);
  const std::vector<std::string> expected = {"image_id", "filepath", "grade", "patient_id",
                                             "source"};
  for (const auto& name : expected) table.column(name, origin);
  if (table.header != expected) {
    throw ValidationError(origin + ": header must be exactly '" + kManifestHeader + "'");
  }
  Manifest manifest;
  manifest.reserve(table.rows.size());
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    const std::string where =
        origin + ": row " + std::to_string(i + 1) + " (line " + std::to_string(row.line) + ")";
    ImageRecord rec;
    rec.image_id = row.fields[0];
    rec.filepath = row.fields[1];
    rec.source = row.fields[4];
    if (rec.image_id.empty()) throw ValidationError(where + ": empty image_id");
    const std::string& grade = row.fields[2];
    if (grade.size() != 1 || grade[0] < '0' || grade[0] > '4') {
      throw ValidationError(where + ": grade '" + grade + "' is not an integer in 0..4");
    }
    rec.grade = grade[0] - '0';
    if (!row.fields[3].empty()) rec.patient_id = row.fields[3];
    if (!seen.insert(rec.image_id).second) {
      throw ValidationError(where + ": duplicate image_id '" + rec.image_id + "'");
    }
    manifest.push_back(std::move(rec));
  }
  return manifest;
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot open manifest " + path.string());
  return parse_manifest(in, path.string());
}

void write_manifest(std::ostream& out, const Manifest& manifest) {
  out << kManifestHeader << '\n';
  for (const auto& r : manifest) {
    out << csv::escape(r.image_id) << ',' << csv::escape(r.filepath) << ',' << r.grade << ','
        << csv::escape(r.patient_id.value_or("")) << ',' << csv::escape(r.source) << '\n';
  }
}

void save_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write manifest " + path.string());
  write_manifest(out, manifest);
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

void SplitSpec::validate() const {
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r >= 0)) throw ValidationError("split: ratios must be nonnegative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ValidationError("split: ratios must sum to 1 (got " + csv::format_real(sum) + ")");
  }
}

namespace {

// Largest-remainder apportionment, so every count is within 1 of its ideal.
// Splits with a positive ratio then take one record from the split with the
// largest surplus that can spare it.
std::array<std::size_t, 3> split_counts(std::size_t n, const std::array<double, 3>& ratios) {
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> ideal{};
  std::size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    ideal[s] = ratios[s] * static_cast<double>(n);
    counts[s] = std::min(n - assigned, static_cast<std::size_t>(std::floor(ideal[s])));
    assigned += counts[s];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return ideal[a] - std::floor(ideal[a]) > ideal[b] - std::floor(ideal[b]);
  });
  for (int k = 0; assigned < n; k = (k + 1) % 3) {
    if (ratios[order[k]] <= 0) continue;
    ++counts[order[k]];
    ++assigned;
  }
  for (int s = 0; s < 3; ++s) {
    if (ratios[s] <= 0 || counts[s] > 0) continue;
    int donor = -1;
    for (int d = 0; d < 3; ++d) {
      if (counts[d] < (ratios[d] > 0 ? 2u : 1u)) continue;
      if (donor < 0 || static_cast<double>(counts[d]) - ideal[d] >
                           static_cast<double>(counts[donor]) - ideal[donor]) {
        donor = d;
      }
    }
    if (donor < 0) break;
    --counts[donor];
    ++counts[s];
  }
  return counts;
}

void check_class_sizes(const GradeHistogram& hist, const SplitSpec& spec) {
  const int positive = static_cast<int>(
      std::count_if(spec.ratios.begin(), spec.ratios.end(), [](double r) { return r > 0; }));
  for (int g = 0; g < kNumGrades; ++g) {
    if (hist[g] > 0 && hist[g] < static_cast<std::size_t>(positive)) {
      throw ValidationError("split: grade " + std::to_string(g) + " has " +
                            std::to_string(hist[g]) + " records, too few to populate " +
                            std::to_string(positive) + " splits");
    }
  }
}

double deviation(const SplitResult& r, const GradeHistogram& hist, const SplitSpec& spec) {
  double worst = 0.0;
  for (int s = 0; s < 3; ++s) {
    const GradeHistogram h = histogram(r.part(s));
    for (int g = 0; g < kNumGrades; ++g) {
      const double ideal = spec.ratios[s] * static_cast<double>(hist[g]);
      worst = std::max(worst, std::abs(static_cast<double>(h[g]) - ideal));
    }
  }
  return worst;
}

Manifest& part_of(SplitResult& r, int s) { return s == 0 ? r.train : (s == 1 ? r.val : r.test); }

void split_by_image(const Manifest& manifest, const SplitSpec& spec, SplitResult& out) {
  std::mt19937_64 rng(spec.seed);
  std::array<std::vector<std::size_t>, kNumGrades> by_grade;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    by_grade[static_cast<std::size_t>(manifest[i].grade)].push_back(i);
  }
  std::array<std::vector<std::size_t>, 3> chosen;
  for (auto& idx : by_grade) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto counts = split_counts(idx.size(), spec.ratios);
    std::size_t pos = 0;
    for (int s = 0; s < 3; ++s) {
      for (std::size_t k = 0; k < counts[s]; ++k) chosen[s].push_back(idx[pos++]);
    }
  }
  // Keep each split in input order.
  for (int s = 0; s < 3; ++s) {
    std::sort(chosen[s].begin(), chosen[s].end());
    for (std::size_t i : chosen[s]) part_of(out, s).push_back(manifest[i]);
  }
}

// Greedy assignment of whole groups: largest groups first, each to the split
// with the largest remaining per-grade deficit for the grades it contains.
void split_by_group(const Manifest& manifest, const SplitSpec& spec, const GradeHistogram& hist,
                    SplitResult& out) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& r = manifest[i];
    groups[r.patient_id ? "p:" + *r.patient_id : "i:" + r.image_id].push_back(i);
  }
  std::vector<const std::vector<std::size_t>*> order;
  order.reserve(groups.size());
  for (const auto& [key, members] : groups) order.push_back(&members);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(),
                   [](const auto* a, const auto* b) { return a->size() > b->size(); });

  std::array<std::array<double, kNumGrades>, 3> target{};
  std::array<std::array<double, kNumGrades>, 3> have{};
  for (int s = 0; s < 3; ++s)
    for (int g = 0; g < kNumGrades; ++g) target[s][g] = spec.ratios[s] * static_cast<double>(hist[g]);

  std::array<std::vector<std::size_t>, 3> chosen;
  for (const auto* members : order) {
    std::array<double, kNumGrades> counts{};
    for (std::size_t i : *members) counts[static_cast<std::size_t>(manifest[i].grade)] += 1.0;
    int best = -1;
    double best_score = 0.0;
    for (int s = 0; s < 3; ++s) {
      if (spec.ratios[s] <= 0) continue;
      double score = 0.0;
      for (int g = 0; g < kNumGrades; ++g) {
        if (counts[g] > 0) score += counts[g] * (target[s][g] - have[s][g]) / std::max(1.0, target[s][g]);
      }
      if (best < 0 || score > best_score) {
        best = s;
        best_score = score;
      }
    }
    for (int g = 0; g < kNumGrades; ++g) have[best][g] += counts[g];
    chosen[best].insert(chosen[best].end(), members->begin(), members->end());
  }
  for (int s = 0; s < 3; ++s) {
    std::sort(chosen[s].begin(), chosen[s].end());
    for (std::size_t i : chosen[s]) part_of(out, s).push_back(manifest[i]);
  }
}

}  // namespace

SplitResult stratified_split(const Manifest& manifest, const SplitSpec& spec) {
  spec.validate();
  const GradeHistogram hist = histogram(manifest);
  check_class_sizes(hist, spec);
  const bool any_patient = std::any_of(manifest.begin(), manifest.end(),
                                       [](const ImageRecord& r) { return r.patient_id.has_value(); });
  SplitResult out;
  if (spec.group_by_patient && any_patient) {
    split_by_group(manifest, spec, hist, out);
    out.grouped = true;
    out.note = "patient-grouped split; records without patient_id form their own group";
  } else {
    split_by_image(manifest, spec, out);
    out.note = spec.group_by_patient ? "no patient ids present; fell back to image-level stratification"
                                     : "image-level stratification";
  }
  out.max_deviation = deviation(out, hist, spec);
  return out;
}

namespace {

nlohmann::json histogram_json(const GradeHistogram& h) {
  return nlohmann::json(std::vector<std::size_t>(h.begin(), h.end()));
}

}  // namespace

nlohmann::json split_summary(const SplitResult& result, const SplitSpec& spec) {
  nlohmann::json j;
  j["seed"] = spec.seed;
  j["ratios"] = spec.ratios;
  j["group_by_patient"] = spec.group_by_patient;
  j["grouped"] = result.grouped;
  j["note"] = result.note;
  j["max_deviation"] = result.max_deviation;
  const char* names[3] = {"train", "val", "test"};
  for (int s = 0; s < 3; ++s) {
    j["counts"][names[s]] = histogram_json(histogram(result.part(s)));
    j["sizes"][names[s]] = result.part(s).size();
  }
  return j;
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

Manifest resample(const Manifest& records, const ResampleSpec& spec) {
  std::array<std::vector<std::size_t>, kNumGrades> by_grade;
  for (std::size_t i = 0; i < records.size(); ++i) {
    by_grade[static_cast<std::size_t>(records[i].grade)].push_back(i);
  }
  std::mt19937_64 rng(spec.seed);
  std::vector<std::size_t> picked;
  for (int g = 0; g < kNumGrades; ++g) {
    auto& idx = by_grade[g];
    const std::size_t target = spec.target_counts[g];
    if (target == 0) continue;
    if (idx.empty()) {
      throw ValidationError("resample: grade " + std::to_string(g) + " has no records but target " +
                            std::to_string(target));
    }
    if (target <= idx.size()) {
      std::shuffle(idx.begin(), idx.end(), rng);
      picked.insert(picked.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(target));
      continue;
    }
    if (!spec.with_replacement) {
      throw ValidationError("resample: grade " + std::to_string(g) + " has " +
                            std::to_string(idx.size()) + " records, target " +
                            std::to_string(target) + " needs sampling with replacement");
    }
    picked.insert(picked.end(), idx.begin(), idx.end());
    std::uniform_int_distribution<std::size_t> draw(0, idx.size() - 1);
    for (std::size_t k = idx.size(); k < target; ++k) picked.push_back(idx[draw(rng)]);
  }
  std::shuffle(picked.begin(), picked.end(), rng);
  Manifest out;
  out.reserve(picked.size());
  for (std::size_t i : picked) out.push_back(records[i]);
  return out;
}

nlohmann::json resample_summary(const Manifest& input, const Manifest& output,
                                const ResampleSpec& spec) {
  nlohmann::json j;
  j["seed"] = spec.seed;
  j["with_replacement"] = spec.with_replacement;
  j["targets"] = histogram_json(spec.target_counts);
  j["input_counts"] = histogram_json(histogram(input));
  j["output_counts"] = histogram_json(histogram(output));
  std::set<std::string> unique;
  for (const auto& r : output) unique.insert(r.image_id);
  j["unique_images"] = unique.size();
  j["total"] = output.size();
  return j;
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

void RgbImage::validate() const {
  if (width < 1 || height < 1) throw ValidationError("image: zero-sized image");
  if (pixels.size() != static_cast<std::size_t>(3 * width * height)) {
    throw ValidationError("image: buffer holds " + std::to_string(pixels.size()) +
                          " bytes, expected " + std::to_string(3 * width * height));
  }
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure("cannot open image " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || !in || maxval != 255) {
    throw RuntimeFailure(path.string() + ": only binary 8-bit PPM (P6, maxval 255) is supported");
  }
  in.get();
  RgbImage img(w, h);
  img.validate();
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw RuntimeFailure(path.string() + ": truncated pixel data");
  return img;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  image.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write image " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

AugmentParams AugmentParams::standard() {
  AugmentParams p;
  p.hflip_prob = 0.5;
  p.vflip_prob = 0.5;
  p.rotation_max_deg = 30.0;
  p.brightness = 0.2;
  p.contrast = 0.2;
  p.saturation = 0.2;
  p.translate_frac = 0.05;
  p.scale_min = 0.95;
  p.scale_max = 1.05;
  return p;
}

AugmentParams AugmentParams::minority() {
  AugmentParams p = standard();
  p.hflip_prob = 0.6;
  p.vflip_prob = 0.6;
  p.rotation_max_deg = 35.0;
  p.brightness = 0.3;
  p.contrast = 0.3;
  p.saturation = 0.3;
  p.hue = 0.05;
  p.erase_prob = 0.4;
  return p;
}

void AugmentParams::validate() const {
  for (double prob : {hflip_prob, vflip_prob, erase_prob}) {
    if (!(prob >= 0 && prob <= 1)) throw ValidationError("augment: probabilities must be in [0, 1]");
  }
  if (!(rotation_max_deg >= 0 && rotation_max_deg <= 180)) {
    throw ValidationError("augment: rotation must be in [0, 180] degrees");
  }
  for (double j : {brightness, contrast, saturation}) {
    if (!(j >= 0 && j <= 1)) throw ValidationError("augment: jitter strengths must be in [0, 1]");
  }
  if (!(hue >= 0 && hue <= 0.5)) throw ValidationError("augment: hue must be in [0, 0.5]");
  if (!(translate_frac >= 0 && translate_frac < 1)) {
    throw ValidationError("augment: translate fraction must be in [0, 1)");
  }
  if (!(scale_min > 0 && scale_min <= scale_max)) throw ValidationError("augment: bad scale range");
  if (!(erase_area_min > 0 && erase_area_min <= erase_area_max && erase_area_max <= 1)) {
    throw ValidationError("augment: bad erase area range");
  }
  if (!(erase_aspect_min > 0 && erase_aspect_min <= erase_aspect_max)) {
    throw ValidationError("augment: bad erase aspect range");
  }
}

const AugmentParams& AugmentationConfig::for_grade(int grade) const {
  if (!valid_grade(grade)) throw ValidationError("augment: grade " + std::to_string(grade) + " out of range");
  return minority_grades[static_cast<std::size_t>(grade)] ? minority : standard;
}

AugmentationConfig AugmentationConfig::uniform(const AugmentParams& params) {
  AugmentationConfig c;
  c.standard = params;
  c.minority = params;
  return c;
}

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool coin(Rng& rng, double p) { return uniform(rng, 0.0, 1.0) < p; }

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

RgbImage flip(const RgbImage& src, bool horizontal) {
  RgbImage out(src.width, src.height);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      const int sx = horizontal ? src.width - 1 - x : x;
      const int sy = horizontal ? y : src.height - 1 - y;
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = src.at(sx, sy, c);
    }
  return out;
}

// Rotation about the centre, then scale, then translation; sampled by
// inverse mapping with bilinear interpolation. Outside pixels are black.
RgbImage warp(const RgbImage& src, double angle_deg, double scale, double tx, double ty) {
  RgbImage out(src.width, src.height);
  const double theta = angle_deg * M_PI / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cx = (src.width - 1) / 2.0, cy = (src.height - 1) / 2.0;
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      const double dx = (x - cx - tx) / scale, dy = (y - cy - ty) / scale;
      const double sx = cs * dx + sn * dy + cx;
      const double sy = -sn * dx + cs * dy + cy;
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) {
          const int px = x0 + (k & 1), py = y0 + (k >> 1);
          const double wgt = ((k & 1) ? fx : 1.0 - fx) * ((k >> 1) ? fy : 1.0 - fy);
          if (wgt == 0.0 || px < 0 || py < 0 || px >= src.width || py >= src.height) continue;
          acc += wgt * src.at(px, py, c);
        }
        out.at(x, y, c) = to_byte(acc);
      }
    }
  }
  return out;
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0.0;
  if (d == 0) {
    h = 0;
  } else if (mx == r) {
    h = std::fmod((g - b) / d, 6.0);
  } else if (mx == g) {
    h = (b - r) / d + 2.0;
  } else {
    h = (r - g) / d + 4.0;
  }
  h /= 6.0;
  if (h < 0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double hh = h * 6.0;
  const int sector = static_cast<int>(std::floor(hh)) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

void jitter(RgbImage& img, double brightness, double contrast, double saturation, double hue) {
  const std::size_t n = static_cast<std::size_t>(img.width * img.height);
  std::vector<double> px(img.pixels.begin(), img.pixels.end());
  auto gray = [&](std::size_t i) { return 0.299 * px[3 * i] + 0.587 * px[3 * i + 1] + 0.114 * px[3 * i + 2]; };
  for (double& v : px) v = std::clamp(v * brightness, 0.0, 255.0);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += gray(i);
  mean /= static_cast<double>(n);
  for (double& v : px) v = std::clamp((v - mean) * contrast + mean, 0.0, 255.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = gray(i);
    for (int c = 0; c < 3; ++c) px[3 * i + c] = std::clamp((px[3 * i + c] - g) * saturation + g, 0.0, 255.0);
  }
  if (hue != 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      double h, s, v;
      rgb_to_hsv(px[3 * i] / 255.0, px[3 * i + 1] / 255.0, px[3 * i + 2] / 255.0, h, s, v);
      h = std::fmod(h + hue + 1.0, 1.0);
      double r, g, b;
      hsv_to_rgb(h, s, v, r, g, b);
      px[3 * i] = r * 255.0, px[3 * i + 1] = g * 255.0, px[3 * i + 2] = b * 255.0;
    }
  }
  for (std::size_t k = 0; k < px.size(); ++k) img.pixels[k] = to_byte(px[k]);
}

std::optional<EraseRect> pick_erase_rect(Rng& rng, const AugmentParams& p, int width, int height) {
  const double area = static_cast<double>(width) * height;
  const double log_lo = std::log(p.erase_aspect_min), log_hi = std::log(p.erase_aspect_max);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = uniform(rng, p.erase_area_min, p.erase_area_max) * area;
    const double aspect = std::exp(uniform(rng, log_lo, log_hi));
    const int h = static_cast<int>(std::lround(std::sqrt(target * aspect)));
    const int w = static_cast<int>(std::lround(std::sqrt(target / aspect)));
    const double frac = static_cast<double>(w) * h / area;
    if (w < 1 || h < 1 || w > width || h > height) continue;
    if (frac < p.erase_area_min || frac > p.erase_area_max) continue;
    EraseRect r;
    r.width = w;
    r.height = h;
    r.x = std::uniform_int_distribution<int>(0, width - w)(rng);
    r.y = std::uniform_int_distribution<int>(0, height - h)(rng);
    for (auto& c : r.fill) c = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 255)(rng));
    return r;
  }
  return std::nullopt;
}

}  // namespace

RgbImage augment(const RgbImage& image, int grade, const AugmentationConfig& config,
                 std::uint64_t seed, AugmentTrace* trace) {
  image.validate();
  const AugmentParams& p = config.for_grade(grade);
  p.validate();
  Rng rng(seed);
  AugmentTrace t;
  // Every draw happens regardless of the probabilities so a seed maps to
  // the same random stream under any config.
  t.hflip = coin(rng, p.hflip_prob);
  t.vflip = coin(rng, p.vflip_prob);
  t.angle_deg = uniform(rng, -1.0, 1.0) * p.rotation_max_deg;
  t.translate_x = uniform(rng, -1.0, 1.0) * p.translate_frac * image.width;
  t.translate_y = uniform(rng, -1.0, 1.0) * p.translate_frac * image.height;
  t.scale = p.scale_min + uniform(rng, 0.0, 1.0) * (p.scale_max - p.scale_min);
  t.brightness = 1.0 + uniform(rng, -1.0, 1.0) * p.brightness;
  t.contrast = 1.0 + uniform(rng, -1.0, 1.0) * p.contrast;
  t.saturation = 1.0 + uniform(rng, -1.0, 1.0) * p.saturation;
  t.hue_shift = uniform(rng, -1.0, 1.0) * p.hue;
  const bool erase = coin(rng, p.erase_prob);

  RgbImage out = image;
  if (t.hflip) out = flip(out, true);
  if (t.vflip) out = flip(out, false);
  if (t.angle_deg != 0.0 || t.scale != 1.0 || t.translate_x != 0.0 || t.translate_y != 0.0) {
    out = warp(out, t.angle_deg, t.scale, t.translate_x, t.translate_y);
  }
  if (t.brightness != 1.0 || t.contrast != 1.0 || t.saturation != 1.0 || t.hue_shift != 0.0) {
    jitter(out, t.brightness, t.contrast, t.saturation, t.hue_shift);
  }
  if (erase) {
    t.erased = pick_erase_rect(rng, p, out.width, out.height);
    if (t.erased) {
      const auto& r = *t.erased;
      for (int y = r.y; y < r.y + r.height; ++y)
        for (int x = r.x; x < r.x + r.width; ++x)
          for (int c = 0; c < 3; ++c) out.at(x, y, c) = r.fill[static_cast<std::size_t>(c)];
    }
  }
  if (trace) *trace = t;
  return out;
}

}  // namespace drgrade
