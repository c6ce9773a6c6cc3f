#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <variant>

#include "json.hpp"

#include "drgrade/io.hpp"
#include "drgrade/training.hpp"

namespace drgrade {

// Checkpoints are GFE1 containers of tensor entries (one per parameter, plus
// batch-norm running statistics) whose metadata JSON records the
// architecture. The same JSON is written to "<checkpoint>.json".

inline constexpr const char* kCheckpointFormat = "drgrade-checkpoint";

inline nlohmann::json architecture_json(const FcnHeadConfig& c) {
  return {{"in_channels", c.in_channels},
          {"widths", c.widths},
          {"kernel", c.kernel},
          {"reduction_ratio", c.reduction_ratio},
          {"cbam_after", c.cbam_after},
          {"bn_eps", c.batchnorm.eps},
          {"bn_momentum", c.batchnorm.momentum}};
}

inline FcnHeadConfig fcn_config_from_json(const nlohmann::json& j) {
  FcnHeadConfig c;
  c.in_channels = j.at("in_channels").get<Index>();
  c.widths = j.at("widths").get<std::vector<Index>>();
  c.kernel = j.at("kernel").get<Index>();
  c.reduction_ratio = j.at("reduction_ratio").get<Index>();
  c.cbam_after = j.at("cbam_after").get<std::vector<int>>();
  c.batchnorm.eps = j.at("bn_eps").get<double>();
  c.batchnorm.momentum = j.at("bn_momentum").get<double>();
  c.validate();
  return c;
}

namespace detail {

template <typename Scalar>
io::Entry tensor_entry(const std::string& name, const Tensor<Scalar>& t) {
  io::Entry e;
  e.id = name;
  e.kind = io::EntryKind::kTensor;
  for (Index d : t.shape()) e.dims.push_back(static_cast<std::uint32_t>(d));
  e.values.resize(static_cast<std::size_t>(t.size()));
  for (Index i = 0; i < t.size(); ++i) e.values[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
  return e;
}

template <typename Scalar>
io::Entry vector_entry(const std::string& name, const Vector<Scalar>& v) {
  return tensor_entry(name, Tensor<Scalar>({v.size()}, v));
}

template <typename Scalar>
void load_tensor(const io::Container& c, const std::string& name, Tensor<Scalar>& t) {
  const io::Entry* e = c.find(name);
  if (!e) throw ValidationError("checkpoint: missing tensor '" + name + "'");
  Shape shape(e->dims.begin(), e->dims.end());
  if (shape != t.shape()) {
    throw ShapeError("checkpoint: tensor '" + name + "' has shape " + shape_string(shape) +
                     ", architecture expects " + shape_string(t.shape()));
  }
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(e->values[static_cast<std::size_t>(i)]);
}

template <typename Scalar>
void load_vector(const io::Container& c, const std::string& name, Vector<Scalar>& v) {
  Tensor<Scalar> t({v.size()});
  load_tensor(c, name, t);
  v = t.flat();
}

inline void write_sidecar(const std::filesystem::path& path, const nlohmann::json& meta) {
  std::ofstream out(path.string() + ".json");
  if (!out) throw RuntimeFailure("cannot write " + path.string() + ".json");
  out << meta.dump(2) << '\n';
}

}  // namespace detail

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, FcnHead<Scalar> head) {
  nlohmann::json meta{{"format", kCheckpointFormat},
                      {"version", 1},
                      {"head", "fcn"},
                      {"architecture", architecture_json(head.params().config)}};
  io::Container c;
  c.metadata = meta.dump();
  head.visit_parameters([&](const std::string& name, Tensor<Scalar>& t) {
    c.entries.push_back(detail::tensor_entry(name, t));
  });
  const auto& blocks = head.params().blocks;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".bn.";
    c.entries.push_back(detail::vector_entry(prefix + "running_mean", blocks[b].running.mean));
    c.entries.push_back(detail::vector_entry(prefix + "running_var", blocks[b].running.var));
  }
  io::write_container(path, c);
  detail::write_sidecar(path, meta);
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, RankingHead<Scalar> head) {
  nlohmann::json meta{{"format", kCheckpointFormat},
                      {"version", 1},
                      {"head", "ranking"},
                      {"architecture",
                       {{"dim", head.input_dim()},
                        {"temperature", head.temperature()},
                        {"similarity", head.similarity() == Similarity::kCosine ? "cosine" : "inner_product"}}}};
  io::Container c;
  c.metadata = meta.dump();
  head.visit_parameters([&](const std::string& name, Tensor<Scalar>& t) {
    c.entries.push_back(detail::tensor_entry(name, t));
  });
  io::write_container(path, c);
  detail::write_sidecar(path, meta);
}

template <typename Scalar>
using AnyHead = std::variant<FcnHead<Scalar>, RankingHead<Scalar>>;

template <typename Scalar>
AnyHead<Scalar> load_checkpoint(const std::filesystem::path& path) {
  const io::Container c = io::read_container(path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(c.metadata);
    if (meta.at("format").get<std::string>() != kCheckpointFormat) {
      throw ValidationError(path.string() + ": not a checkpoint");
    }
    if (meta.at("version").get<int>() != 1) {
      throw io::FormatError(io::FormatErrorKind::kVersionMismatch, path.string() + ": unsupported checkpoint version");
    }
    const auto& arch = meta.at("architecture");
    if (meta.at("head").get<std::string>() == "fcn") {
      FcnHead<Scalar> head = FcnHead<Scalar>::init(fcn_config_from_json(arch), 0);
      head.visit_parameters([&](const std::string& name, Tensor<Scalar>& t) { detail::load_tensor(c, name, t); });
      auto& blocks = head.params().blocks;
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        const std::string prefix = "block" + std::to_string(b) + ".bn.";
        detail::load_vector(c, prefix + "running_mean", blocks[b].running.mean);
        detail::load_vector(c, prefix + "running_var", blocks[b].running.var);
      }
      return head;
    }
    if (meta.at("head").get<std::string>() == "ranking") {
      const Index dim = arch.at("dim").get<Index>();
      Tensor<Scalar> prompts({Index{kNumGrades}, dim});
      detail::load_tensor(c, "prompts", prompts);
      const std::string sim = arch.at("similarity").get<std::string>();
      if (sim != "cosine" && sim != "inner_product") throw ValidationError(path.string() + ": unknown similarity");
      return RankingHead<Scalar>(std::move(prompts), arch.at("temperature").get<double>(),
                                 sim == "cosine" ? Similarity::kCosine : Similarity::kInnerProduct);
    }
    throw ValidationError(path.string() + ": unknown head '" + meta.at("head").get<std::string>() + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": checkpoint metadata: " + e.what());
  }
}

// ===========================================================================
// Datasets from a manifest and an embedding source
// ===========================================================================

/// Stacks the manifest's embeddings in manifest order. `find(id)` returns
/// the entry or nullopt. All entries must share one kind and shape.
template <typename Scalar, typename Find>
Dataset<Scalar> stack_embeddings(const Manifest& manifest, Find&& find) {
  if (manifest.empty()) throw ValidationError("load_dataset: empty manifest");
  Dataset<Scalar> data;
  std::vector<std::uint32_t> dims;
  std::size_t stride = 0;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& rec = manifest[i];
    const std::optional<io::Entry> e = find(rec.image_id);
    if (!e) {
      throw ValidationError("no embedding for image_id '" + rec.image_id + "' (manifest row " +
                            std::to_string(i + 1) + ")");
    }
    if (i == 0) {
      if (e->kind == io::EntryKind::kTensor) throw ValidationError("load_dataset: tensor entries are not embeddings");
      dims = e->dims;
      stride = e->values.size();
      Shape shape{static_cast<Index>(manifest.size())};
      for (auto d : dims) shape.push_back(static_cast<Index>(d));
      data.inputs = Tensor<Scalar>(shape);
    } else if (e->dims != dims) {
      throw ShapeError("embedding for '" + rec.image_id + "' has different dims than '" + manifest[0].image_id + "'");
    }
    for (std::size_t k = 0; k < stride; ++k) {
      data.inputs[static_cast<Index>(i * stride + k)] = static_cast<Scalar>(e->values[k]);
    }
    data.labels.push_back(rec.grade);
    data.ids.push_back(rec.image_id);
  }
  return data;
}

template <typename Scalar>
Dataset<Scalar> load_dataset(const Manifest& manifest, const io::EmbeddingSource& source) {
  return stack_embeddings<Scalar>(manifest, [&](const std::string& id) -> std::optional<io::Entry> {
    if (!source.contains(id)) return std::nullopt;
    return source.get(id);
  });
}

template <typename Scalar>
Dataset<Scalar> load_dataset(const Manifest& manifest, const io::Container& container) {
  std::map<std::string, const io::Entry*> by_id;
  for (const auto& e : container.entries) by_id.emplace(e.id, &e);
  return stack_embeddings<Scalar>(manifest, [&](const std::string& id) -> std::optional<io::Entry> {
    auto it = by_id.find(id);
    if (it == by_id.end()) return std::nullopt;
    return *it->second;
  });
}

}  // namespace drgrade
