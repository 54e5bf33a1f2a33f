#pragma once

// Class prediction: anatomy registry, focal loss, and the per-ROI class and
// quality-flag heads.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "sonoqa/autograd.hpp"
#include "sonoqa/params.hpp"

namespace sonoqa {

enum class Section { kHead, kAbdominal, kHeart };

inline constexpr std::array<Section, 3> kAllSections{Section::kHead, Section::kAbdominal, Section::kHeart};

inline std::string to_string(Section s) {
  switch (s) {
    case Section::kHead: return "head";
    case Section::kAbdominal: return "abdominal";
    case Section::kHeart: return "heart";
  }
  return "?";
}

inline Section parse_section(std::string_view s) {
  if (s == "head") return Section::kHead;
  if (s == "abdominal" || s == "abdomen") return Section::kAbdominal;
  if (s == "heart") return Section::kHeart;
  throw ConfigError("unknown section '" + std::string(s) + "' (expected head, abdominal or heart)");
}

struct StructureClass {
  Section section;
  std::size_t id;  // index within the section; the background class is id == count
  std::string code;
  std::string name;
};

// Essential structures per section. The abdominal registry uses four classes:
// "stomach bubble" and "stomach" are one class (ST).
inline const std::vector<StructureClass>& structures(Section s) {
  static const std::vector<StructureClass> head{
      {Section::kHead, 0, "CSP", "cavum septi pellucidi"}, {Section::kHead, 1, "T", "thalamus"},
      {Section::kHead, 2, "TV", "third ventricle"},        {Section::kHead, 3, "BM", "brain midline"},
      {Section::kHead, 4, "LS", "lateral sulcus"},         {Section::kHead, 5, "CP", "choroid plexus"}};
  static const std::vector<StructureClass> abdominal{{Section::kAbdominal, 0, "ST", "stomach"},
                                                     {Section::kAbdominal, 1, "SP", "spine"},
                                                     {Section::kAbdominal, 2, "UV", "umbilical vein"},
                                                     {Section::kAbdominal, 3, "AO", "aorta"}};
  static const std::vector<StructureClass> heart{
      {Section::kHeart, 0, "LV", "left ventricle"},  {Section::kHeart, 1, "LA", "left atrium"},
      {Section::kHeart, 2, "RV", "right ventricle"}, {Section::kHeart, 3, "RA", "right atrium"},
      {Section::kHeart, 4, "DAO", "descending aorta"}};
  switch (s) {
    case Section::kHead: return head;
    case Section::kAbdominal: return abdominal;
    case Section::kHeart: return heart;
  }
  return head;
}

inline std::size_t structure_count(Section s) { return structures(s).size(); }

inline std::size_t structure_id(Section s, std::string_view code) {
  for (const auto& c : structures(s))
    if (c.code == code) return c.id;
  throw InputError("unknown structure '" + std::string(code) + "' for section " + to_string(s));
}

// ------------------------------------------------------------------ focal loss

struct FocalParams {
  double gamma = 2.0;
};

inline constexpr double kMinProbability = 1e-7;

// Probability assigned to the true outcome.
inline double p_t(double p, int y) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("probability must lie in [0,1]");
  return y == 1 ? p : 1.0 - p;
}

// -(1 - p_t)^gamma * ln(p_t), with p_t clamped to >= 1e-7.
inline double focal_loss(double pt, double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("focal gamma must be non-negative");
  if (!(pt >= 0.0 && pt <= 1.0)) throw ConfigError("p_t must lie in [0,1]");
  const double p = std::max(pt, kMinProbability);
  return -std::pow(1.0 - p, gamma) * std::log(p);
}

namespace ag {

// Elementwise focal loss from log p_t.
template <typename T>
Var<T> focal_from_log_pt(const Var<T>& log_pt, T gamma) {
  const Var<T> lp = clamp_min(log_pt, static_cast<T>(std::log(kMinProbability)));
  const Var<T> weight = pow(affine(exp(lp), T(-1), T(1)), gamma);
  return scale(mul(weight, lp), T(-1));
}

// logits [N,C], labels in [0,C) -> per-row focal loss [N].
template <typename T>
Var<T> focal_multiclass(const Var<T>& logits, const std::vector<std::size_t>& labels, T gamma) {
  return focal_from_log_pt(pick(log_softmax(logits, 1), labels), gamma);
}

// Binary focal loss on logits z (p = sigmoid(z)); targets in {0,1}.
template <typename T>
Var<T> focal_binary(const Var<T>& logits, const std::vector<int>& targets, T gamma) {
  if (targets.size() != logits.numel()) throw DimensionError("focal_binary: target count mismatch");
  Tensor<T> sign(logits.shape());
  for (std::size_t i = 0; i < targets.size(); ++i) sign[i] = targets[i] == 1 ? T(1) : T(-1);
  return focal_from_log_pt(log_sigmoid(mul(logits, logits.tape().constant(std::move(sign)))), gamma);
}

}  // namespace ag

// ---------------------------------------------------------------- CPN heads

template <typename T>
void add_cpn_head_params(ParameterSet<T>& p, std::size_t d_f, std::size_t num_structures, std::uint64_t seed) {
  p.add_glorot("cpn.cls.w", {d_f, num_structures + 1}, d_f, num_structures + 1, seed);
  p.add_zeros("cpn.cls.b", {num_structures + 1});
  p.add_glorot("cpn.q.w", {d_f, 1}, d_f, 1, seed);
  p.add_zeros("cpn.q.b", {1});
}

template <typename T>
struct CpnOutputs {
  Var<T> class_logits;    // [N, K+1]
  Var<T> quality_logits;  // [N, 1]
};

template <typename T>
CpnOutputs<T> cpn_heads(const Binding<T>& p, const Var<T>& fused) {
  return {ag::add_row_bias(ag::matmul(fused, p("cpn.cls.w")), p("cpn.cls.b")),
          ag::add_row_bias(ag::matmul(fused, p("cpn.q.w")), p("cpn.q.b"))};
}

struct ClassPrediction {
  std::vector<double> class_probs;  // structures then background
  double quality = 0.5;             // probability the structure meets the standard
};

struct CpnParams {
  Tensor<double> cls_w, cls_b, q_w, q_b;
};

// Softmax class head and sigmoid quality head on one fused ROI feature.
inline ClassPrediction classify(const std::vector<double>& roi_feature, const CpnParams& p) {
  if (p.cls_w.rank() != 2 || roi_feature.size() != p.cls_w.dim(0) || p.q_w.numel() != roi_feature.size())
    throw ConfigError("classify: feature length does not match the head parameters");
  Tape<double> t;
  const auto f = t.constant(Tensor<double>({1, roi_feature.size()}, roi_feature));
  const auto logits = ag::add_row_bias(ag::matmul(f, t.constant(p.cls_w)), t.constant(p.cls_b));
  const auto q = ag::add_row_bias(ag::matmul(f, t.constant(p.q_w.reshaped({roi_feature.size(), 1}))), t.constant(p.q_b));
  ClassPrediction out;
  out.class_probs = ag::softmax(logits, 1).value().values();
  out.quality = ag::sigmoid(q).value().item();
  return out;
}

}  // namespace sonoqa
