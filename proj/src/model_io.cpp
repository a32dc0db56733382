#include <bit>
#include <cstring>
#include <sstream>

#include "xmlwf/error.hpp"
#include "xmlwf/pipeline.hpp"
#include "xmlwf/util.hpp"

namespace xmlwf {

namespace {

constexpr std::string_view kMagic = "XMLWF";
constexpr std::size_t kTrailerSize = 32;

enum ModelTag : std::uint8_t { kLinearTag = 0, kEnsembleTag = 1 };

class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    out_.append(reinterpret_cast<const char*>(raw), sizeof(T));
  }
  void put_text(std::string_view text) {
    put<std::uint64_t>(text.size());
    out_.append(text);
  }
  void put_vector(const Vector& v) {
    put<std::uint64_t>(static_cast<std::uint64_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) put<double>(v(i));
  }
  void raw(std::string_view bytes) { out_.append(bytes); }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::size_t pos) : data_(data), pos_(pos) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }
  std::string get_text() {
    const auto len = get<std::uint64_t>();
    need(len);
    std::string s(data_.substr(pos_, len));
    pos_ += len;
    return s;
  }
  Vector get_vector() {
    const auto len = get<std::uint64_t>();
    need(len * sizeof(double));
    Vector v(static_cast<Eigen::Index>(len));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = get<double>();
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::uint64_t count) const {
    if (count > data_.size() - pos_) throw Error(Errc::TruncatedBlob, "model blob ends early");
  }
  std::string_view data_;
  std::size_t pos_;
};

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto pos = text.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(text.substr(start));
      break;
    }
    out.emplace_back(text.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

FittedPipeline parse_payload(std::string_view payload, std::size_t start) {
  ByteReader r(payload, start);
  FittedPipeline model;
  model.spec = parse_spec_text(r.get_text());
  model.train_data_hash = r.get_text();
  model.n_features = static_cast<Eigen::Index>(r.get<std::uint64_t>());
  const auto n_transformers = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_transformers; ++i) {
    const auto kind_raw = r.get<std::uint8_t>();
    if (kind_raw > 1) throw Error(Errc::HashMismatch, "unknown transformer tag");
    FittedTransformer t{static_cast<TransformerKind>(kind_raw), r.get_vector(), {}};
    t.scale = t.kind == TransformerKind::standardize ? r.get_vector() : Vector::Ones(t.center.size());
    model.transformers.push_back(std::move(t));
  }
  const auto tag = r.get<std::uint8_t>();
  if (tag == kLinearTag) {
    LinearModel lin;
    lin.weights = r.get_vector();
    lin.bias = r.get<double>();
    model.model = std::move(lin);
  } else if (tag == kEnsembleTag) {
    TreeEnsemble ensemble;
    ensemble.init = r.get<double>();
    const auto n_trees = r.get<std::uint64_t>();
    for (std::uint64_t t = 0; t < n_trees; ++t) {
      Tree tree;
      const auto n_nodes = r.get<std::uint64_t>();
      for (std::uint64_t k = 0; k < n_nodes; ++k) {
        TreeNode node;
        node.feature = r.get<std::int64_t>();
        node.threshold = r.get<double>();
        node.left = r.get<std::int64_t>();
        node.right = r.get<std::int64_t>();
        node.value = r.get<double>();
        tree.nodes.push_back(node);
      }
      ensemble.trees.push_back(std::move(tree));
    }
    model.model = std::move(ensemble);
  } else {
    throw Error(Errc::HashMismatch, "unknown model tag");
  }
  if (r.pos() != payload.size()) throw Error(Errc::HashMismatch, "trailing bytes in model blob");
  return model;
}

// Rejects blobs whose arrays would index out of range at prediction time.
void check_structure(const FittedPipeline& model) {
  const auto d = model.n_features;
  for (const auto& t : model.transformers) {
    if (t.center.size() != d || t.scale.size() != d) {
      throw Error(Errc::HashMismatch, "transformer width does not match model width");
    }
  }
  if (const auto* lin = std::get_if<LinearModel>(&model.model)) {
    if (lin->weights.size() != d) throw Error(Errc::HashMismatch, "weight count mismatch");
    if (model.spec.estimator.kind == EstimatorKind::random_forest ||
        model.spec.estimator.kind == EstimatorKind::gradient_boosting) {
      throw Error(Errc::HashMismatch, "linear state for a tree estimator");
    }
    return;
  }
  if (model.spec.estimator.kind == EstimatorKind::logistic_regression ||
      model.spec.estimator.kind == EstimatorKind::linear_svm) {
    throw Error(Errc::HashMismatch, "tree state for a linear estimator");
  }
  for (const auto& tree : std::get<TreeEnsemble>(model.model).trees) {
    const auto size = static_cast<std::int64_t>(tree.nodes.size());
    if (size == 0) throw Error(Errc::HashMismatch, "empty tree");
    for (std::int64_t i = 0; i < size; ++i) {
      const auto& node = tree.nodes[static_cast<std::size_t>(i)];
      if (node.is_leaf()) continue;
      if (node.feature >= d || node.left <= i || node.right <= i || node.left >= size ||
          node.right >= size) {
        throw Error(Errc::HashMismatch, "tree node links out of range");
      }
    }
  }
}

}  // namespace

std::string canonical_spec_text(const PipelineSpec& spec) {
  std::ostringstream out;
  out << "transformers=";
  for (std::size_t i = 0; i < spec.transformers.size(); ++i) {
    out << (i ? "," : "") << to_string(spec.transformers[i]);
  }
  out << "\nestimator=" << to_string(spec.estimator.kind);
  out << "\nseed=" << spec.estimator.seed;
  for (const auto& [name, value] : spec.estimator.hyperparams) {
    out << "\nparam." << name << "=" << format_real(value);
  }
  out << "\n";
  return out.str();
}

PipelineSpec parse_spec_text(std::string_view text) {
  PipelineSpec spec;
  for (const auto& line : split(text, '\n')) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(Errc::BadMagic, "malformed spec line '" + line + "'");
    const auto key = line.substr(0, eq);
    const auto value = line.substr(eq + 1);
    if (key == "transformers") {
      if (!value.empty()) {
        for (const auto& t : split(value, ',')) spec.transformers.push_back(parse_transformer_kind(t));
      }
    } else if (key == "estimator") {
      spec.estimator.kind = parse_estimator_kind(value);
    } else if (key == "seed") {
      spec.estimator.seed = std::stoull(value);
    } else if (key.rfind("param.", 0) == 0) {
      const auto v = parse_real(value);
      if (!v) throw Error(Errc::BadMagic, "malformed hyperparameter '" + line + "'");
      spec.estimator.hyperparams[key.substr(6)] = *v;
    } else {
      throw Error(Errc::BadMagic, "unknown spec key '" + key + "'");
    }
  }
  validate(spec);
  return spec;
}

std::string serialize_model(const FittedPipeline& model) {
  ByteWriter w;
  w.raw(kMagic);
  w.put<std::uint32_t>(model.format_version);
  w.put_text(canonical_spec_text(model.spec));
  w.put_text(model.train_data_hash);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(model.n_features));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.transformers.size()));
  for (const auto& t : model.transformers) {
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.kind));
    w.put_vector(t.center);
    if (t.kind == TransformerKind::standardize) w.put_vector(t.scale);
  }
  if (const auto* lin = std::get_if<LinearModel>(&model.model)) {
    w.put<std::uint8_t>(kLinearTag);
    w.put_vector(lin->weights);
    w.put<double>(lin->bias);
  } else {
    const auto& ensemble = std::get<TreeEnsemble>(model.model);
    w.put<std::uint8_t>(kEnsembleTag);
    w.put<double>(ensemble.init);
    w.put<std::uint64_t>(ensemble.trees.size());
    for (const auto& tree : ensemble.trees) {
      w.put<std::uint64_t>(tree.nodes.size());
      for (const auto& node : tree.nodes) {
        w.put<std::int64_t>(node.feature);
        w.put<double>(node.threshold);
        w.put<std::int64_t>(node.left);
        w.put<std::int64_t>(node.right);
        w.put<double>(node.value);
      }
    }
  }
  const auto digest = sha256_raw(w.bytes());
  w.raw(std::string_view(reinterpret_cast<const char*>(digest.data()), digest.size()));
  return std::move(w.bytes());
}

FittedPipeline deserialize_model(std::string_view blob) {
  if (blob.size() < kMagic.size() || blob.substr(0, kMagic.size()) != kMagic) {
    throw Error(Errc::BadMagic, "not an XMLWF model blob");
  }
  ByteReader header(blob, kMagic.size());
  const auto version = header.get<std::uint32_t>();
  if (version != kModelFormatVersion) {
    throw Error(Errc::UnsupportedVersion, "model format version " + std::to_string(version));
  }
  if (blob.size() < header.pos() + kTrailerSize) {
    throw Error(Errc::TruncatedBlob, "model blob has no trailer");
  }
  const auto payload = blob.substr(0, blob.size() - kTrailerSize);
  const auto digest = sha256_raw(payload);
  const bool checksum_ok =
      std::memcmp(digest.data(), blob.data() + payload.size(), kTrailerSize) == 0;

  FittedPipeline model;
  try {
    model = parse_payload(payload, header.pos());
  } catch (const Error& e) {
    if (e.code() == Errc::TruncatedBlob || checksum_ok) throw;
    throw Error(Errc::HashMismatch, std::string("model blob checksum mismatch (") + e.what() + ")");
  } catch (const std::exception& e) {
    throw Error(Errc::HashMismatch, std::string("corrupt model blob: ") + e.what());
  }
  if (!checksum_ok) throw Error(Errc::HashMismatch, "model blob checksum mismatch");
  model.format_version = version;
  check_structure(model);
  return model;
}

}  // namespace xmlwf
