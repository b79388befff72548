#include "dtlab/dtmodel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dtlab::model {

void DTConfig::validate() const {
  if (context_len < 1) throw std::invalid_argument("DTConfig: context_len must be >= 1");
  if (embed_dim < 1 || layers < 1 || heads < 1)
    throw std::invalid_argument("DTConfig: embed_dim/layers/heads must be positive");
  if (embed_dim % heads != 0)
    throw std::invalid_argument("DTConfig: embed_dim " + std::to_string(embed_dim) +
                                " not divisible by heads " + std::to_string(heads));
  if (dropout < 0.0f || dropout >= 1.0f)
    throw std::invalid_argument("DTConfig: dropout must be in [0,1)");
  if (state_dim < 1 || act_dim < 1)
    throw std::invalid_argument("DTConfig: state_dim/act_dim must be positive");
  if (max_timestep < 1)
    throw std::invalid_argument("DTConfig: max_timestep must be >= 1");
  if (train_steps < 0 || batch_size < 1)
    throw std::invalid_argument("DTConfig: bad train_steps/batch_size");
}

std::vector<nn::LayerParams*> DTModel::layer_list() {
  std::vector<nn::LayerParams*> out = {&embed_rtg, &embed_state, &embed_action,
                                       &embed_timestep, &embed_ln};
  for (auto& b : blocks) {
    out.push_back(&b.ln1);
    out.push_back(&b.attn_qkv);
    out.push_back(&b.attn_proj);
    out.push_back(&b.ln2);
    out.push_back(&b.ffn_in);
    out.push_back(&b.ffn_out);
  }
  out.push_back(&final_ln);
  out.push_back(&action_head);
  return out;
}

std::vector<const nn::LayerParams*> DTModel::layer_list() const {
  auto mut = const_cast<DTModel*>(this)->layer_list();
  return {mut.begin(), mut.end()};
}

std::vector<nn::LayerParams*> DTModel::eligible_layers() {
  std::vector<nn::LayerParams*> out;
  for (auto* l : layer_list())
    if (l->kind == nn::LayerKind::kLinear && l->compressible) out.push_back(l);
  return out;
}

std::vector<nn::ParamRef> DTModel::params() {
  std::vector<nn::ParamRef> out;
  for (auto* l : layer_list()) {
    nn::ParamRef w;
    w.var = l->weight;
    w.name = l->name + ".weight";
    w.decay = l->kind == nn::LayerKind::kLinear;
    if (auto it = comp.find(w.name); it != comp.end() && !it->second.mask.empty())
      w.mask = it->second.mask.data();
    out.push_back(std::move(w));
    if (l->bias) {
      nn::ParamRef b;
      b.var = l->bias;
      b.name = l->name + ".bias";
      b.decay = false;
      out.push_back(std::move(b));
    }
  }
  return out;
}

std::int64_t DTModel::param_count() const {
  std::int64_t n = 0;
  for (const auto* l : layer_list()) {
    n += l->weight->numel();
    if (l->bias) n += l->bias->numel();
  }
  return n;
}

namespace {
nn::LayerParams clone_layer(const nn::LayerParams& src) {
  nn::LayerParams dst;
  dst.kind = src.kind;
  dst.name = src.name;
  dst.compressible = src.compressible;
  dst.weight = nn::make_var(src.weight->shape, src.weight->value, true);
  if (src.bias) dst.bias = nn::make_var(src.bias->shape, src.bias->value, true);
  return dst;
}
}  // namespace

DTModel DTModel::clone() const {
  DTModel out;
  out.cfg = cfg;
  out.norm = norm;
  out.train_max_return = train_max_return;
  out.strategy = strategy;
  out.embed_rtg = clone_layer(embed_rtg);
  out.embed_state = clone_layer(embed_state);
  out.embed_action = clone_layer(embed_action);
  out.embed_timestep = clone_layer(embed_timestep);
  out.embed_ln = clone_layer(embed_ln);
  for (const auto& b : blocks)
    out.blocks.push_back({clone_layer(b.ln1), clone_layer(b.attn_qkv),
                          clone_layer(b.attn_proj), clone_layer(b.ln2),
                          clone_layer(b.ffn_in), clone_layer(b.ffn_out)});
  out.final_ln = clone_layer(final_ln);
  out.action_head = clone_layer(action_head);
  out.comp = comp;
  return out;
}

DTModel build_model(const DTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 7));
  DTModel m;
  m.cfg = cfg;
  std::fill(m.norm.std.begin(), m.norm.std.end(), 1.0f);
  const int d = cfg.embed_dim;
  m.embed_rtg = nn::make_linear("embed_rtg", 1, d, rng);
  m.embed_state = nn::make_linear("embed_state", cfg.state_dim, d, rng);
  m.embed_action = nn::make_linear("embed_action", cfg.act_dim, d, rng);
  m.embed_timestep = nn::make_embedding("embed_timestep", cfg.max_timestep, d, rng);
  m.embed_ln = nn::make_layer_norm("embed_ln", d);
  for (int i = 0; i < cfg.layers; ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    Block b;
    b.ln1 = nn::make_layer_norm(p + "ln1", d);
    b.attn_qkv = nn::make_linear(p + "attn_qkv", d, 3 * d, rng);
    b.attn_proj = nn::make_linear(p + "attn_proj", d, d, rng);
    b.ln2 = nn::make_layer_norm(p + "ln2", d);
    b.ffn_in = nn::make_linear(p + "ffn_in", d, cfg.ffn_dim(), rng);
    b.ffn_out = nn::make_linear(p + "ffn_out", cfg.ffn_dim(), d, rng);
    m.blocks.push_back(std::move(b));
  }
  m.final_ln = nn::make_layer_norm("final_ln", d);
  m.action_head = nn::make_linear("action_head", d, cfg.act_dim, rng);
  return m;
}

Batch sample_batch(const data::Dataset& dataset, const data::NormStats& norm,
                   int window, int batch_size, Rng& rng) {
  if (dataset.empty()) throw std::invalid_argument("sample_batch: empty dataset");
  Batch batch;
  batch.batch = batch_size;
  batch.window = window;
  const int sd = data::kStateDim, ad = data::kActionDim;
  batch.rtg.assign(static_cast<std::size_t>(batch_size) * window, 0.0f);
  batch.states.assign(static_cast<std::size_t>(batch_size) * window * sd, 0.0f);
  batch.actions.assign(static_cast<std::size_t>(batch_size) * window * ad, 0.0f);
  batch.timesteps.assign(static_cast<std::size_t>(batch_size) * window, 0);
  batch.slot_mask.assign(static_cast<std::size_t>(batch_size) * window, 0);
  batch.target_actions = batch.actions;
  for (int b = 0; b < batch_size; ++b) {
    const auto& traj = dataset[rng.index(dataset.size())];
    const std::size_t len = traj.length();
    const std::size_t start = rng.index(len);
    const std::size_t real = std::min<std::size_t>(window, len - start);
    const std::size_t pad = static_cast<std::size_t>(window) - real;
    const auto rtg_full = data::returns_to_go(traj.rewards);
    for (std::size_t i = 0; i < real; ++i) {
      const std::size_t t = start + i;
      const std::size_t slot = static_cast<std::size_t>(b) * window + pad + i;
      batch.rtg[slot] = rtg_full[t];
      const auto flat = data::apply_norm(traj.states[t], norm);
      std::copy(flat.begin(), flat.end(), batch.states.begin() + slot * sd);
      std::copy(traj.actions[t].begin(), traj.actions[t].end(),
                batch.actions.begin() + slot * ad);
      std::copy(traj.actions[t].begin(), traj.actions[t].end(),
                batch.target_actions.begin() + slot * ad);
      batch.timesteps[slot] = static_cast<int>(t);
      batch.slot_mask[slot] = 1;
    }
  }
  return batch;
}

nn::VarPtr forward(const DTModel& model, const Batch& batch, bool training,
                   Rng* dropout_rng) {
  const auto& cfg = model.cfg;
  const int b = batch.batch, k = batch.window, d = cfg.embed_dim;
  const std::size_t slots = static_cast<std::size_t>(b) * k;
  if (batch.rtg.size() != slots ||
      batch.states.size() != slots * static_cast<std::size_t>(cfg.state_dim) ||
      batch.actions.size() != slots * static_cast<std::size_t>(cfg.act_dim) ||
      batch.timesteps.size() != slots || batch.slot_mask.size() != slots)
    throw std::invalid_argument("forward: inconsistent batch buffers");
  for (int t : batch.timesteps)
    if (t < 0 || t >= cfg.max_timestep)
      throw std::out_of_range("forward: timestep " + std::to_string(t) +
                              " outside [0," + std::to_string(cfg.max_timestep) + ")");
  if (training && !dropout_rng)
    throw std::invalid_argument("forward: training mode requires a dropout rng");

  auto rtg = nn::make_var({b, k, 1}, batch.rtg);
  auto states = nn::make_var({b, k, cfg.state_dim}, batch.states);
  auto actions = nn::make_var({b, k, cfg.act_dim}, batch.actions);

  auto rtg_emb = nn::linear(rtg, model.embed_rtg);
  auto state_emb = nn::linear(states, model.embed_state);
  auto action_emb = nn::linear(actions, model.embed_action);
  auto time_emb =
      nn::embedding_rows(model.embed_timestep, batch.timesteps, {b, k, d});

  auto tok_r = nn::add(rtg_emb, time_emb);
  auto tok_s = nn::add(state_emb, time_emb);
  auto tok_a = nn::add(action_emb, time_emb);
  auto x = nn::interleave3(tok_r, tok_s, tok_a);  // [B, 3K, d]
  x = nn::layer_norm(x, model.embed_ln);

  // All three tokens of a padded slot are removed from every key set.
  std::vector<std::uint8_t> key_valid(slots * 3);
  for (std::size_t s = 0; s < slots; ++s)
    key_valid[3 * s] = key_valid[3 * s + 1] = key_valid[3 * s + 2] =
        batch.slot_mask[s];

  const bool drop = training && cfg.dropout > 0.0f;
  if (drop) x = nn::dropout(x, cfg.dropout, *dropout_rng, true);
  for (const auto& block : model.blocks) {
    auto h = nn::layer_norm(x, block.ln1);
    auto qkv = nn::linear(h, block.attn_qkv);
    auto [q, kk, v] = nn::split_last3(qkv);
    auto attn = nn::causal_attention(q, kk, v, cfg.heads, key_valid);
    attn = nn::linear(attn, block.attn_proj);
    if (drop) attn = nn::dropout(attn, cfg.dropout, *dropout_rng, true);
    x = nn::add(x, attn);
    auto h2 = nn::layer_norm(x, block.ln2);
    auto mlp = nn::linear(h2, block.ffn_in);
    mlp = nn::gelu(mlp);
    mlp = nn::linear(mlp, block.ffn_out);
    if (drop) mlp = nn::dropout(mlp, cfg.dropout, *dropout_rng, true);
    x = nn::add(x, mlp);
  }
  x = nn::layer_norm(x, model.final_ln);
  auto state_tokens = nn::take_stride3(x, 1);  // predictions read here
  auto pred = nn::linear(state_tokens, model.action_head);
  return nn::tanh_act(pred);
}

TrainResult train_steps(DTModel& model, const data::Dataset& dataset, int steps,
                        std::uint64_t seed) {
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  const auto& cfg = model.cfg;
  for (const auto& traj : dataset)
    if (traj.length() > static_cast<std::size_t>(cfg.max_timestep))
      throw std::invalid_argument("train: trajectory longer than max_timestep");

  Rng sample_rng(mix_seed(seed, 100));
  Rng dropout_rng(mix_seed(seed, 101));
  auto params = model.params();
  nn::AdamState opt;
  nn::init_adam_state(opt, params);
  nn::AdamConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;

  TrainResult result;
  result.loss_curve.reserve(static_cast<std::size_t>(steps));
  for (int step = 0; step < steps; ++step) {
    Batch batch =
        sample_batch(dataset, model.norm, cfg.context_len, cfg.batch_size, sample_rng);
    auto pred = forward(model, batch, true, &dropout_rng);
    auto target =
        nn::make_var({batch.batch, batch.window, cfg.act_dim}, batch.target_actions);
    auto loss = nn::mse_masked(pred, target, batch.slot_mask);
    const float loss_val = loss->value[0];
    if (!std::isfinite(loss_val))
      throw std::runtime_error("train: non-finite loss at step " +
                               std::to_string(step));
    for (auto& p : params) p.var->zero_grad();
    nn::backward(loss);
    nn::clip_grad_norm(params, cfg.grad_clip);
    nn::adam_step(params, opt, adam);
    result.loss_curve.push_back(loss_val);
  }
  return result;
}

TrainResult train(DTModel& model, const data::Dataset& dataset,
                  std::uint64_t seed) {
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  model.norm = data::fit_norm_stats(dataset);
  float best = 0.0f;
  for (const auto& traj : dataset) best = std::max(best, traj.total_return);
  model.train_max_return = best;
  return train_steps(model, dataset, model.cfg.train_steps, seed);
}

RolloutResult rollout(const DTModel& model, const env::EnvConfig& env_cfg,
                      std::uint64_t env_seed, float target_return) {
  if (target_return < 0.0f)
    throw std::invalid_argument("rollout: target_return must be >= 0");
  const auto& cfg = model.cfg;
  if (cfg.state_dim != data::kStateDim || cfg.act_dim != data::kActionDim)
    throw std::invalid_argument("rollout: model dims do not match trajectory types");
  if (env_cfg.horizon > cfg.max_timestep)
    throw std::invalid_argument("rollout: horizon exceeds model max_timestep");

  nn::NoGradGuard no_grad;
  auto [env, obs] = env::reset(env_cfg, env_seed);

  std::vector<data::State> states;
  std::vector<data::Action> actions;
  std::vector<float> rtg_ctx;
  RolloutResult result;
  result.rtg_trace.push_back(target_return);

  float rtg_now = target_return;
  const int window = cfg.context_len;
  const int sd = cfg.state_dim, ad = cfg.act_dim;
  for (int t = 0; t < env_cfg.horizon; ++t) {
    states.push_back(obs);
    rtg_ctx.push_back(rtg_now);

    const int w = std::min<int>(t + 1, window);
    const int first = t + 1 - w;
    Batch batch;
    batch.batch = 1;
    batch.window = w;
    batch.rtg.resize(static_cast<std::size_t>(w));
    batch.states.resize(static_cast<std::size_t>(w) * sd);
    batch.actions.assign(static_cast<std::size_t>(w) * ad, 0.0f);
    batch.timesteps.resize(static_cast<std::size_t>(w));
    batch.slot_mask.assign(static_cast<std::size_t>(w), 1);
    for (int i = 0; i < w; ++i) {
      const std::size_t src = static_cast<std::size_t>(first + i);
      batch.rtg[static_cast<std::size_t>(i)] = rtg_ctx[src];
      const auto flat = data::apply_norm(states[src], model.norm);
      std::copy(flat.begin(), flat.end(),
                batch.states.begin() + static_cast<std::size_t>(i) * sd);
      if (first + i < t)  // current slot keeps the zero placeholder
        std::copy(actions[src].begin(), actions[src].end(),
                  batch.actions.begin() + static_cast<std::size_t>(i) * ad);
      batch.timesteps[static_cast<std::size_t>(i)] = first + i;
    }
    auto pred = forward(model, batch, false, nullptr);
    data::Action act{};
    const std::size_t last = static_cast<std::size_t>(w - 1) * ad;
    for (int j = 0; j < ad; ++j)
      act[static_cast<std::size_t>(j)] = pred->value[last + static_cast<std::size_t>(j)];
    actions.push_back(act);

    const float reward = data::compute_reward(obs.imu, obs.prev_action, act);
    rtg_now = std::max(0.0f, rtg_now - reward);
    result.rtg_trace.push_back(rtg_now);
    obs = env::step(env, env_cfg, act).obs;
  }
  result.trajectory = data::augment_trajectory(std::move(states), std::move(actions));
  return result;
}

}  // namespace dtlab::model
