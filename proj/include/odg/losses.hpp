#pragma once

#include <optional>
#include <string>
#include <vector>

#include "odg/net.hpp"

namespace odg {

// ---------------------------------------------------------------------------
// embedding projection heads

enum class Branch { Original, Hallucinated };
enum class Stage { HRoI, RRoI };

/// Pooled RoI features flattened to rows, tagged with their provenance so the
/// head pairing below can be enforced.
struct PooledRois {
  Var x;  // (n, C*g*g)
  Branch branch;
  Stage stage;
};

enum class ProjectionHead { F1, F2, F3, F4 };

inline const char* head_name(ProjectionHead h) {
  switch (h) {
    case ProjectionHead::F1: return "proj.f1";
    case ProjectionHead::F2: return "proj.f2";
    case ProjectionHead::F3: return "proj.f3";
    case ProjectionHead::F4: return "proj.f4";
  }
  throw ConfigError("unknown projection head");
}

inline void init_projection_heads(ParamStore& ps, int in_dim, int hidden, int embed_dim, Rng& rng) {
  for (const char* name : {"proj.f1", "proj.f2", "proj.f3", "proj.f4"}) {
    init_linear(ps, std::string(name) + ".l1", in_dim, hidden, rng);
    init_linear(ps, std::string(name) + ".l2", hidden, embed_dim, rng);
  }
}

/// Flatten -> 2-layer MLP -> unit-norm rows. f1/f3 serve the original branch
/// (HRoI/RRoI), f2/f4 the hallucinated branch; any other pairing throws.
inline Var project_embeddings(Tape& t, ParamStore& ps, const PooledRois& pooled, ProjectionHead head) {
  const bool ok = (head == ProjectionHead::F1 && pooled.branch == Branch::Original && pooled.stage == Stage::HRoI) ||
                  (head == ProjectionHead::F2 && pooled.branch == Branch::Hallucinated && pooled.stage == Stage::HRoI) ||
                  (head == ProjectionHead::F3 && pooled.branch == Branch::Original && pooled.stage == Stage::RRoI) ||
                  (head == ProjectionHead::F4 && pooled.branch == Branch::Hallucinated && pooled.stage == Stage::RRoI);
  if (!ok) throw ConfigError(std::string("project_embeddings: head ") + head_name(head) +
                             " does not match the pooled batch's branch/stage");
  const std::string name = head_name(head);
  Var h = relu(linear_layer(t, ps, name + ".l1", pooled.x));
  return l2_normalize_rows(linear_layer(t, ps, name + ".l2", h));
}

// ---------------------------------------------------------------------------
// gated InfoNCE

/// Paired embeddings: rows 0..n-1 from the original branch, rows n..2n-1 from
/// the hallucinated branch; row j and row j+n form the positive pair. Gates
/// of hallucinated rows copy their paired original row.
struct EmbeddingBatch {
  Var z;                      // (2n, d), rows unit-norm
  std::vector<double> gates;  // length 2n, entries 0 or 1
};

inline EmbeddingBatch make_embedding_batch(Var z_orig, Var z_hallu, const std::vector<int>& gates) {
  const Tensor& a = z_orig.val();
  const Tensor& b = z_hallu.val();
  if (a.shape != b.shape || a.shape.size() != 2)
    throw ShapeError("make_embedding_batch: branch embeddings must share shape (n,d)");
  if (static_cast<int>(gates.size()) != a.shape[0])
    throw ShapeError("make_embedding_batch: gate count mismatch");
  EmbeddingBatch batch;
  batch.z = concat_rows({z_orig, z_hallu});
  batch.gates.reserve(gates.size() * 2);
  for (int g : gates) batch.gates.push_back(static_cast<double>(g));
  for (int g : gates) batch.gates.push_back(static_cast<double>(g));
  return batch;
}

/// Gated contrastive consistency over positive pairs:
///   L = -sum_j gate_j * log( exp(z_j . z_{j+} / tau) / sum_{k != j} exp(z_j . z_k / tau) )
/// The denominator runs over every other row including the positive; only the
/// self term is excluded. Serves both the HRoI and the RRoI objective.
inline Var info_nce_gated(const EmbeddingBatch& batch, double tau) {
  if (tau <= 0.0) throw InvalidInput("info_nce_gated: tau must be positive");
  const Tensor& z = batch.z.val();
  if (z.shape.size() != 2 || z.shape[0] < 2 || z.shape[0] % 2 != 0)
    throw ShapeError("info_nce_gated: expected (2n, d) embeddings with n >= 1");
  const int rows = z.shape[0];
  const int n = rows / 2;
  if (static_cast<int>(batch.gates.size()) != rows)
    throw ShapeError("info_nce_gated: gate count mismatch");
  Tape& t = *batch.z.tape;
  std::vector<int> pair(static_cast<std::size_t>(rows));
  for (int j = 0; j < rows; ++j) pair[static_cast<std::size_t>(j)] = j < n ? j + n : j - n;
  Var sim = scalar_mul(matmul(batch.z, transpose(batch.z)), 1.0 / tau);
  Var pos = gather_pairs(sim, pair);
  Var lse = logsumexp_offdiag_rows(sim);
  Var terms = mul(sub(lse, pos), t.constant(Tensor({rows}, batch.gates)));
  return sum_all(terms);
}

/// Plain-value wrapper: rows of z are normalized before the loss.
inline double info_nce_gated(const Tensor& z_orig, const Tensor& z_hallu,
                             const std::vector<int>& gates, double tau) {
  Tape tape;
  EmbeddingBatch batch = make_embedding_batch(l2_normalize_rows(tape.constant(z_orig)),
                                              l2_normalize_rows(tape.constant(z_hallu)), gates);
  return info_nce_gated(batch, tau).val().scalar();
}

// ---------------------------------------------------------------------------
// category distributions and style consistency

inline void init_category_heads(ParamStore& ps, int in_dim, int hidden, int num_classes, Rng& rng) {
  for (const char* name : {"cat.g1", "cat.g2"}) {
    init_linear(ps, std::string(name) + ".l1", in_dim, hidden, rng);
    init_linear(ps, std::string(name) + ".l2", hidden, num_classes + 1, rng);
  }
}

/// g1 maps original RRoI features to the category simplex, g2 the
/// hallucinated ones.
inline Var category_distribution(Tape& t, ParamStore& ps, const PooledRois& pooled) {
  if (pooled.stage != Stage::RRoI)
    throw ConfigError("category_distribution: expects RRoI features");
  const std::string name = pooled.branch == Branch::Original ? "cat.g1" : "cat.g2";
  Var h = relu(linear_layer(t, ps, name + ".l1", pooled.x));
  return softmax_rows(linear_layer(t, ps, name + ".l2", h));
}

constexpr double kLogFloor = 1e-12;

/// Jensen-Shannon divergence between row distributions, averaged over rows:
///   (KL[p||m] + KL[q||m]) / 2 with m = (p+q)/2.
inline Var jsd_consistency(Var p, Var q) {
  detail::require_same_shape(p.val(), q.val(), "jsd_consistency");
  if (p.val().shape.size() != 2) throw ShapeError("jsd_consistency: expected (n, K)");
  const int rows = p.val().shape[0];
  Var m = scalar_mul(add(p, q), 0.5);
  Var lm = log_floored(m, kLogFloor);
  Var kl_p = mul(p, sub(log_floored(p, kLogFloor), lm));
  Var kl_q = mul(q, sub(log_floored(q, kLogFloor), lm));
  Var per_element = scalar_mul(add(kl_p, kl_q), 0.5);
  return scalar_mul(sum_all(per_element), 1.0 / rows);
}

inline double jsd_consistency(const Tensor& p, const Tensor& q) {
  Tape tape;
  return jsd_consistency(tape.constant(p), tape.constant(q)).val().scalar();
}

enum class SecMetric { L2, Kl, Jsd };

inline SecMetric parse_sec_metric(const std::string& name) {
  if (name == "l2") return SecMetric::L2;
  if (name == "kl") return SecMetric::Kl;
  if (name == "jsd") return SecMetric::Jsd;
  throw ConfigError("unknown distance metric: " + name + " (expected l2|kl|jsd)");
}

inline const char* sec_metric_name(SecMetric m) {
  switch (m) {
    case SecMetric::L2: return "l2";
    case SecMetric::Kl: return "kl";
    case SecMetric::Jsd: return "jsd";
  }
  throw ConfigError("unknown distance metric");
}

/// Distance-metric variants for the style consistency term. l2 is the squared
/// row difference summed per row; kl is KL[p||q]; both averaged over rows.
inline Var consistency_variant(Var p, Var q, SecMetric metric) {
  detail::require_same_shape(p.val(), q.val(), "consistency_variant");
  if (p.val().shape.size() != 2) throw ShapeError("consistency_variant: expected (n, K)");
  const int rows = p.val().shape[0];
  switch (metric) {
    case SecMetric::L2: {
      Var d = sub(p, q);
      return scalar_mul(sum_all(mul(d, d)), 1.0 / rows);
    }
    case SecMetric::Kl: {
      Var kl = mul(p, sub(log_floored(p, kLogFloor), log_floored(q, kLogFloor)));
      return scalar_mul(sum_all(kl), 1.0 / rows);
    }
    case SecMetric::Jsd:
      return jsd_consistency(p, q);
  }
  throw ConfigError("unknown distance metric");
}

inline double consistency_variant(const Tensor& p, const Tensor& q, SecMetric metric) {
  Tape tape;
  return consistency_variant(tape.constant(p), tape.constant(q), metric).val().scalar();
}

// ---------------------------------------------------------------------------
// total objective

/// Enabled loss terms summed with unit weights; disabled ones contribute
/// exactly zero by omission.
inline Var total_loss(Tape& t, const std::vector<std::pair<Var, double>>& parts) {
  std::optional<Var> acc;
  for (const auto& [v, weight] : parts) {
    Var scaled = weight == 1.0 ? v : scalar_mul(v, weight);
    acc = acc ? add(*acc, scaled) : scaled;
  }
  return acc ? *acc : t.scalar(0.0);
}

}  // namespace odg
