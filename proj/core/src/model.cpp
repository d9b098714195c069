#include "minicollie/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace minicollie {

void ModelConfig::validate() const {
  auto positive = [](int64_t v, const char* what) {
    if (v < 1) throw ConfigError(std::string("model config: ") + what + " must be >= 1, got " +
                                 std::to_string(v));
  };
  positive(hidden_size, "hidden_size");
  positive(num_attention_heads, "num_attention_heads");
  positive(num_hidden_layers, "num_hidden_layers");
  positive(intermediate_size, "intermediate_size");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  positive(attention_block_size, "attention_block_size");
  if (hidden_size % num_attention_heads != 0)
    throw ConfigError("model config: hidden_size " + std::to_string(hidden_size) +
                      " not divisible by num_attention_heads " +
                      std::to_string(num_attention_heads));
}

Tensor apply_linear(Tape& tape, const Tensor& x, const LinearSlot& slot) {
  Tensor y = linear(tape, x, slot.weight);
  if (slot.lora) {
    Tensor ax = linear(tape, x, slot.lora->a);
    Tensor delta = linear(tape, ax, slot.lora->b);
    y = add(tape, y, scale(tape, delta, slot.lora->scaling));
  }
  return y;
}

// ---- attention -------------------------------------------------------------

namespace {

void check_attention_shapes(const Tensor& q, const Tensor& k, const Tensor& v,
                            const char* op) {
  if (q.ndim() != 4 || k.shape() != q.shape() || v.shape() != q.shape())
    throw ContractError(std::string(op) + ": expected matching [b,h,s,d] inputs, got " +
                        shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                        shape_str(v.shape()));
}

Tensor causal_mask_const(const Tensor& like_scores) {
  const int64_t s = like_scores.dim(like_scores.ndim() - 1);
  std::vector<double> m(static_cast<size_t>(s * s), 0.0);
  for (int64_t i = 0; i < s; ++i)
    for (int64_t j = i + 1; j < s; ++j) m[static_cast<size_t>(i * s + j)] = -1e30;
  return Tensor::leaf({s, s}, std::move(m), false);
}

}  // namespace

Tensor naive_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                       bool causal) {
  check_attention_shapes(q, k, v, "naive_attention");
  const int64_t s = q.dim(2), d = q.dim(3);
  runtime_stats().note_score_buffer(s * s);

  Tensor scores = scale(tape, matmul_nt(tape, q, k), 1.0 / std::sqrt(static_cast<double>(d)));
  if (causal) scores = add(tape, scores, causal_mask_const(scores));
  Tensor probs = softmax_lastdim(tape, scores);
  return matmul(tape, probs, v);
}

Tensor tiled_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                       bool causal, int64_t block) {
  check_attention_shapes(q, k, v, "tiled_attention");
  if (block < 1) throw ConfigError("tiled_attention: block must be >= 1, got " + std::to_string(block));
  const int64_t b = q.dim(0), h = q.dim(1), s = q.dim(2), d = q.dim(3);
  const int64_t bt_max = std::min(block, s);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  runtime_stats().note_score_buffer(s * bt_max);

  const int64_t heads_total = b * h;
  std::vector<double> out(static_cast<size_t>(q.numel()), 0.0);
  // Per-row logsumexp of the (masked) score rows, kept for the backward pass.
  std::vector<double> lse(static_cast<size_t>(heads_total * s));

  {
    const double* pq = q.data().data();
    const double* pk = k.data().data();
    const double* pv = v.data().data();
    std::vector<double> tile(static_cast<size_t>(s * bt_max));
    std::vector<double> row_max(static_cast<size_t>(s));
    std::vector<double> row_sum(static_cast<size_t>(s));
    for (int64_t bh = 0; bh < heads_total; ++bh) {
      const double* Q = pq + bh * s * d;
      const double* K = pk + bh * s * d;
      const double* V = pv + bh * s * d;
      double* O = out.data() + bh * s * d;
      std::fill(row_max.begin(), row_max.end(), -std::numeric_limits<double>::infinity());
      std::fill(row_sum.begin(), row_sum.end(), 0.0);

      for (int64_t t0 = 0; t0 < s; t0 += block) {
        const int64_t bt = std::min(block, s - t0);
        for (int64_t i = 0; i < s; ++i) {
          const int64_t jmax = causal ? std::min(bt, i - t0 + 1) : bt;
          if (jmax <= 0) continue;
          double* srow = tile.data() + i * bt_max;
          const double* qi = Q + i * d;
          double tile_max = -std::numeric_limits<double>::infinity();
          for (int64_t j = 0; j < jmax; ++j) {
            const double* kj = K + (t0 + j) * d;
            double acc = 0.0;
            for (int64_t t = 0; t < d; ++t) acc += qi[t] * kj[t];
            srow[j] = acc * inv_sqrt_d;
            tile_max = std::max(tile_max, srow[j]);
          }
          const double m_new = std::max(row_max[static_cast<size_t>(i)], tile_max);
          const double c = std::exp(row_max[static_cast<size_t>(i)] - m_new);
          double* oi = O + i * d;
          if (c != 1.0)
            for (int64_t t = 0; t < d; ++t) oi[t] *= c;
          double p_sum = 0.0;
          for (int64_t j = 0; j < jmax; ++j) {
            const double p = std::exp(srow[j] - m_new);
            p_sum += p;
            const double* vj = V + (t0 + j) * d;
            for (int64_t t = 0; t < d; ++t) oi[t] += p * vj[t];
          }
          row_sum[static_cast<size_t>(i)] = row_sum[static_cast<size_t>(i)] * c + p_sum;
          row_max[static_cast<size_t>(i)] = m_new;
        }
      }
      for (int64_t i = 0; i < s; ++i) {
        const double inv_l = 1.0 / row_sum[static_cast<size_t>(i)];
        double* oi = O + i * d;
        for (int64_t t = 0; t < d; ++t) oi[t] *= inv_l;
        lse[static_cast<size_t>(bh * s + i)] =
            row_max[static_cast<size_t>(i)] + std::log(row_sum[static_cast<size_t>(i)]);
      }
    }
  }

  Tensor y = tape.make_op_output(q.shape(), std::move(out), {q, k, v});
  tape.set_last_backward([q = q, k = k, v = v, y, lse = std::move(lse), b, h, s, d, block, causal,
                          inv_sqrt_d]() mutable {
    if (!y.has_grad() || !y.grad_needed()) return;
    const int64_t heads_total = b * h;
    const double* pq = q.data().data();
    const double* pk = k.data().data();
    const double* pv = v.data().data();
    const double* po = y.data().data();
    const double* pdo = y.grad().data();
    double* dq = q.grad_needed() ? q.grad().data() : nullptr;
    double* dk = k.grad_needed() ? k.grad().data() : nullptr;
    double* dv = v.grad_needed() ? v.grad().data() : nullptr;
    std::vector<double> delta(static_cast<size_t>(s));
    for (int64_t bh = 0; bh < heads_total; ++bh) {
      const double* Q = pq + bh * s * d;
      const double* K = pk + bh * s * d;
      const double* V = pv + bh * s * d;
      const double* O = po + bh * s * d;
      const double* DO = pdo + bh * s * d;
      const double* L = lse.data() + bh * s;
      for (int64_t i = 0; i < s; ++i) {
        double acc = 0.0;
        for (int64_t t = 0; t < d; ++t) acc += DO[i * d + t] * O[i * d + t];
        delta[static_cast<size_t>(i)] = acc;
      }
      for (int64_t t0 = 0; t0 < s; t0 += block) {
        const int64_t bt = std::min(block, s - t0);
        for (int64_t i = 0; i < s; ++i) {
          const int64_t jmax = causal ? std::min(bt, i - t0 + 1) : bt;
          if (jmax <= 0) continue;
          const double* qi = Q + i * d;
          const double* doi = DO + i * d;
          for (int64_t j = 0; j < jmax; ++j) {
            const double* kj = K + (t0 + j) * d;
            const double* vj = V + (t0 + j) * d;
            double sij = 0.0;
            for (int64_t t = 0; t < d; ++t) sij += qi[t] * kj[t];
            const double p = std::exp(sij * inv_sqrt_d - L[i]);
            double dp = 0.0;
            for (int64_t t = 0; t < d; ++t) dp += doi[t] * vj[t];
            const double ds = p * (dp - delta[static_cast<size_t>(i)]) * inv_sqrt_d;
            if (dv) {
              double* dvj = dv + (bh * s + t0 + j) * d;
              for (int64_t t = 0; t < d; ++t) dvj[t] += p * doi[t];
            }
            if (dq) {
              double* dqi = dq + (bh * s + i) * d;
              for (int64_t t = 0; t < d; ++t) dqi[t] += ds * kj[t];
            }
            if (dk) {
              double* dkj = dk + (bh * s + t0 + j) * d;
              for (int64_t t = 0; t < d; ++t) dkj[t] += ds * qi[t];
            }
          }
        }
      }
    }
  });
  return y;
}

// ---- model -----------------------------------------------------------------

namespace {

Tensor make_pos_encoding(int64_t max_seq, int64_t hidden) {
  std::vector<double> pe(static_cast<size_t>(max_seq * hidden));
  for (int64_t p = 0; p < max_seq; ++p) {
    for (int64_t i = 0; i < hidden; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) /
                                                 static_cast<double>(hidden));
      const double angle = static_cast<double>(p) * freq;
      pe[static_cast<size_t>(p * hidden + i)] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::leaf({max_seq, hidden}, std::move(pe), false);
}

Tensor init_normal(Rng& rng, Shape shape, double std, const std::string& name) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
  for (double& x : d) x = rng.normal(0.0, std);
  Tensor t = Tensor::leaf(std::move(shape), std::move(d), true);
  t.mark_param(name);
  return t;
}

Tensor init_ones(Shape shape, const std::string& name) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)), 1.0);
  Tensor t = Tensor::leaf(std::move(shape), std::move(d), true);
  t.mark_param(name);
  return t;
}

constexpr double kInitStd = 0.02;

void append_slot_params(const LinearSlot& slot, std::vector<Tensor>& out) {
  out.push_back(slot.weight);
  if (slot.lora) {
    out.push_back(slot.lora->a);
    out.push_back(slot.lora->b);
  }
}

}  // namespace

TransformerModel TransformerModel::build(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  TransformerModel m;
  m.cfg = cfg;
  m.local_heads = cfg.num_attention_heads;
  const int64_t H = cfg.hidden_size, I = cfg.intermediate_size, V = cfg.vocab_size;

  m.tok_embedding = init_normal(rng, {V, H}, kInitStd, "tok_embedding");
  m.pos_encoding = make_pos_encoding(cfg.max_seq_len, H);
  for (int64_t l = 0; l < cfg.num_hidden_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    DecoderBlock blk;
    blk.attn_norm = init_ones({H}, p + "attn_norm");
    blk.q.weight = init_normal(rng, {H, H}, kInitStd, p + "q_proj");
    blk.k.weight = init_normal(rng, {H, H}, kInitStd, p + "k_proj");
    blk.v.weight = init_normal(rng, {H, H}, kInitStd, p + "v_proj");
    blk.o.weight = init_normal(rng, {H, H}, kInitStd, p + "o_proj");
    blk.mlp_norm = init_ones({H}, p + "mlp_norm");
    blk.gate.weight = init_normal(rng, {I, H}, kInitStd, p + "gate_proj");
    blk.up.weight = init_normal(rng, {I, H}, kInitStd, p + "up_proj");
    blk.down.weight = init_normal(rng, {H, I}, kInitStd, p + "down_proj");
    m.blocks.push_back(std::move(blk));
  }
  m.final_norm = init_ones({H}, "final_norm");
  m.lm_head.weight = init_normal(rng, {V, H}, kInitStd, "lm_head");
  return m;
}

Tensor embed_tokens(Tape& tape, const Tensor& tok_embedding, const Tensor& pos_encoding,
                    const std::vector<int32_t>& ids, int64_t batch, int64_t seq) {
  Tensor x = embedding(tape, tok_embedding, ids, batch, seq);
  const int64_t h = tok_embedding.dim(1);
  std::vector<double> slice(pos_encoding.data().begin(),
                            pos_encoding.data().begin() + seq * h);
  Tensor pos = Tensor::leaf({seq, h}, std::move(slice), false);
  return add(tape, x, pos);
}

Tensor decoder_block_forward(Tape& tape, const Tensor& x, const DecoderBlock& block,
                             int64_t local_heads, const ModelConfig& cfg,
                             const BlockHooks& hooks) {
  auto pre = [&](const Tensor& t) { return hooks.pre_parallel ? hooks.pre_parallel(tape, t) : t; };
  auto post = [&](const Tensor& t) { return hooks.post_parallel ? hooks.post_parallel(tape, t) : t; };

  Tensor xn = rms_norm(tape, x, block.attn_norm);
  Tensor xi = pre(xn);
  Tensor q = head_split(tape, apply_linear(tape, xi, block.q), local_heads);
  Tensor k = head_split(tape, apply_linear(tape, xi, block.k), local_heads);
  Tensor v = head_split(tape, apply_linear(tape, xi, block.v), local_heads);
  Tensor attn = cfg.use_tiled_attention
                    ? tiled_attention(tape, q, k, v, /*causal=*/true, cfg.attention_block_size)
                    : naive_attention(tape, q, k, v, /*causal=*/true);
  Tensor o = post(apply_linear(tape, head_merge(tape, attn), block.o));
  Tensor x1 = add(tape, x, o);

  Tensor xn2 = rms_norm(tape, x1, block.mlp_norm);
  Tensor xi2 = pre(xn2);
  Tensor gated = mul(tape, silu(tape, apply_linear(tape, xi2, block.gate)),
                     apply_linear(tape, xi2, block.up));
  Tensor down = post(apply_linear(tape, gated, block.down));
  return add(tape, x1, down);
}

Tensor final_logits(Tape& tape, const Tensor& x, const Tensor& final_norm,
                    const LinearSlot& lm_head) {
  return apply_linear(tape, rms_norm(tape, x, final_norm), lm_head);
}

Tensor TransformerModel::forward(Tape& tape, const std::vector<int32_t>& ids, int64_t batch,
                                 int64_t seq, const BlockHooks& hooks) const {
  if (seq > cfg.max_seq_len)
    throw DataError("forward: sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                    std::to_string(cfg.max_seq_len));
  if (static_cast<int64_t>(ids.size()) != batch * seq)
    throw ContractError("forward: ids length does not match batch*seq");
  Tensor x = embed_tokens(tape, tok_embedding, pos_encoding, ids, batch, seq);
  for (const DecoderBlock& blk : blocks)
    x = decoder_block_forward(tape, x, blk, local_heads, cfg, hooks);
  return final_logits(tape, x, final_norm, lm_head);
}

std::vector<int32_t> TransformerModel::greedy_decode(const std::vector<int32_t>& prompt,
                                                     int64_t max_new,
                                                     std::optional<int32_t> eos_id) const {
  if (prompt.empty()) throw ContractError("greedy_decode: prompt must be non-empty");
  if (static_cast<int64_t>(prompt.size()) > cfg.max_seq_len)
    throw DataError("greedy_decode: prompt length " + std::to_string(prompt.size()) +
                    " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  std::vector<int32_t> ids = prompt;
  for (int64_t step = 0; step < max_new; ++step) {
    if (static_cast<int64_t>(ids.size()) >= cfg.max_seq_len) break;
    Tape tape;
    const int64_t s = static_cast<int64_t>(ids.size());
    Tensor logits = forward(tape, ids, 1, s);
    const double* row = logits.data().data() + (s - 1) * cfg.vocab_size;
    int32_t best = 0;
    for (int64_t t = 1; t < cfg.vocab_size; ++t)
      if (row[t] > row[best]) best = static_cast<int32_t>(t);
    ids.push_back(best);
    if (eos_id && best == *eos_id) break;
  }
  return ids;
}

std::vector<Tensor> TransformerModel::base_parameters() const {
  std::vector<Tensor> out;
  out.push_back(tok_embedding);
  for (const DecoderBlock& blk : blocks) {
    out.push_back(blk.attn_norm);
    out.push_back(blk.q.weight);
    out.push_back(blk.k.weight);
    out.push_back(blk.v.weight);
    out.push_back(blk.o.weight);
    out.push_back(blk.mlp_norm);
    out.push_back(blk.gate.weight);
    out.push_back(blk.up.weight);
    out.push_back(blk.down.weight);
  }
  out.push_back(final_norm);
  out.push_back(lm_head.weight);
  return out;
}

std::vector<Tensor> TransformerModel::parameters() const {
  std::vector<Tensor> out;
  out.push_back(tok_embedding);
  for (const DecoderBlock& blk : blocks) {
    out.push_back(blk.attn_norm);
    append_slot_params(blk.q, out);
    append_slot_params(blk.k, out);
    append_slot_params(blk.v, out);
    append_slot_params(blk.o, out);
    out.push_back(blk.mlp_norm);
    append_slot_params(blk.gate, out);
    append_slot_params(blk.up, out);
    append_slot_params(blk.down, out);
  }
  out.push_back(final_norm);
  append_slot_params(lm_head, out);
  return out;
}

std::vector<Tensor> TransformerModel::trainable_parameters() const {
  std::vector<Tensor> out;
  for (const Tensor& t : parameters())
    if (t.requires_grad()) out.push_back(t);
  return out;
}

int64_t TransformerModel::count_params() const {
  int64_t n = 0;
  for (const Tensor& t : base_parameters()) n += t.numel();
  return n;
}

std::vector<int> TransformerModel::base_param_groups(const ModelConfig& cfg) {
  std::vector<int> groups;
  groups.push_back(0);  // tok_embedding
  for (int64_t l = 0; l < cfg.num_hidden_layers; ++l)
    for (int i = 0; i < 9; ++i) groups.push_back(static_cast<int>(l) + 1);
  groups.push_back(static_cast<int>(cfg.num_hidden_layers) + 1);  // final_norm
  groups.push_back(static_cast<int>(cfg.num_hidden_layers) + 1);  // lm_head
  return groups;
}

std::vector<std::string> TransformerModel::base_param_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  names.push_back("tok_embedding");
  for (int64_t l = 0; l < cfg.num_hidden_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* n : {"attn_norm", "q_proj", "k_proj", "v_proj", "o_proj", "mlp_norm",
                          "gate_proj", "up_proj", "down_proj"})
      names.push_back(p + n);
  }
  names.push_back("final_norm");
  names.push_back("lm_head");
  return names;
}

}  // namespace minicollie
