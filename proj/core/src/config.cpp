#include <fstream>

#include <json.hpp>

#include "minicollie/run_config.hpp"

namespace minicollie {

using nlohmann::json;

void RunConfig::validate() const {
  model.validate();
  if (parallel.dp_size < 1 || parallel.tp_size < 1 || parallel.pp_size < 1)
    throw ConfigError("parallel sizes must be >= 1");
  if (parallel.zero_stage < 0 || parallel.zero_stage > 3)
    throw ConfigError("zero_stage must be in 0..3, got " + std::to_string(parallel.zero_stage));
  optimizer.validate();
  if (lora) lora->validate();
  if (train.batch_size < 1 || train.micro_batch_size < 1 ||
      train.gradient_accumulation_steps < 1)
    throw ConfigError("train: batch_size, micro_batch_size and gradient_accumulation_steps "
                      "must be >= 1");
  if (train.batch_size != train.micro_batch_size * train.gradient_accumulation_steps *
                              parallel.dp_size)
    throw ConfigError(
        "train: batch_size must equal micro_batch_size * gradient_accumulation_steps * "
        "dp_size (" +
        std::to_string(train.batch_size) + " != " + std::to_string(train.micro_batch_size) +
        " * " + std::to_string(train.gradient_accumulation_steps) + " * " +
        std::to_string(parallel.dp_size) + ")");
  if (train.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (train.lr_warmup_steps < 0) throw ConfigError("train: lr_warmup_steps must be >= 0");
  if (eval.unit != "steps" && eval.unit != "epochs")
    throw ConfigError("eval: unit must be 'steps' or 'epochs', got '" + eval.unit + "'");
  if (eval.every < 0) throw ConfigError("eval: every must be >= 0");
  if (precision.param_dtype_bytes != 2 && precision.param_dtype_bytes != 4)
    throw ConfigError("precision: param_dtype_bytes must be 2 or 4");
  if (precision.grad_dtype_bytes != 2 && precision.grad_dtype_bytes != 4)
    throw ConfigError("precision: grad_dtype_bytes must be 2 or 4");
  if (optim::is_fused(optimizer.kind)) {
    if (parallel.zero_stage != 0)
      throw ConfigError("fused optimizer '" + optim::kind_name(optimizer.kind) +
                        "' requires zero_stage 0 (updates happen during backward)");
    if (train.gradient_accumulation_steps != 1)
      throw ConfigError("fused optimizer '" + optim::kind_name(optimizer.kind) +
                        "' requires gradient_accumulation_steps == 1");
  }
}

namespace {

json model_to_json(const ModelConfig& m) {
  return json{{"hidden_size", m.hidden_size},
              {"num_attention_heads", m.num_attention_heads},
              {"num_hidden_layers", m.num_hidden_layers},
              {"intermediate_size", m.intermediate_size},
              {"vocab_size", m.vocab_size},
              {"max_seq_len", m.max_seq_len},
              {"use_tiled_attention", m.use_tiled_attention},
              {"attention_block_size", m.attention_block_size}};
}

void model_from_json(const json& j, ModelConfig& m) {
  m.hidden_size = j.value("hidden_size", m.hidden_size);
  m.num_attention_heads = j.value("num_attention_heads", m.num_attention_heads);
  m.num_hidden_layers = j.value("num_hidden_layers", m.num_hidden_layers);
  m.intermediate_size = j.value("intermediate_size", m.intermediate_size);
  m.vocab_size = j.value("vocab_size", m.vocab_size);
  m.max_seq_len = j.value("max_seq_len", m.max_seq_len);
  m.use_tiled_attention = j.value("use_tiled_attention", m.use_tiled_attention);
  m.attention_block_size = j.value("attention_block_size", m.attention_block_size);
}

}  // namespace

RunConfig RunConfig::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  RunConfig cfg;
  try {
    if (j.contains("model")) model_from_json(j.at("model"), cfg.model);
    if (j.contains("parallel")) {
      const json& p = j.at("parallel");
      cfg.parallel.dp_size = p.value("dp_size", 1);
      cfg.parallel.tp_size = p.value("tp_size", 1);
      cfg.parallel.pp_size = p.value("pp_size", 1);
      cfg.parallel.zero_stage = p.value("zero_stage", 0);
    }
    if (j.contains("precision")) {
      const json& p = j.at("precision");
      cfg.precision.param_dtype_bytes = p.value("param_dtype_bytes", 2);
      cfg.precision.grad_dtype_bytes = p.value("grad_dtype_bytes", 4);
      cfg.precision.master_copy = p.value("master_copy", true);
    }
    if (j.contains("optimizer")) {
      const json& o = j.at("optimizer");
      const auto kind = optim::parse_kind(o.value("kind", "adamw"));
      cfg.optimizer = optim::OptimizerConfig::defaults_for(kind);
      cfg.optimizer.lr = o.value("lr", cfg.optimizer.lr);
      cfg.optimizer.weight_decay = o.value("weight_decay", cfg.optimizer.weight_decay);
      if (o.contains("betas")) {
        const auto& b = o.at("betas");
        if (b.size() >= 1) cfg.optimizer.beta1 = b[0].get<double>();
        if (b.size() >= 2) cfg.optimizer.beta2 = b[1].get<double>();
        if (b.size() >= 3) cfg.optimizer.beta3 = b[2].get<double>();
      }
      cfg.optimizer.eps = o.value("eps", cfg.optimizer.eps);
      if (o.contains("clip_threshold"))
        cfg.optimizer.clip_threshold = o.at("clip_threshold").get<double>();
      cfg.optimizer.adalomo_clip = o.value("adalomo_clip", cfg.optimizer.adalomo_clip);
      cfg.optimizer.sophia_rho = o.value("sophia_rho", cfg.optimizer.sophia_rho);
      cfg.optimizer.update_interval = o.value("update_interval", cfg.optimizer.update_interval);
    }
    if (j.contains("lora") && !j.at("lora").is_null()) {
      const json& l = j.at("lora");
      lora::LoraConfig lc;
      lc.r = l.value("r", lc.r);
      lc.lora_alpha = l.value("lora_alpha", lc.lora_alpha);
      if (l.contains("target_modules"))
        lc.target_modules = l.at("target_modules").get<std::vector<std::string>>();
      lc.bias = l.value("bias", lc.bias);
      lc.task_type = l.value("task_type", lc.task_type);
      cfg.lora = lc;
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
      cfg.train.micro_batch_size = t.value("micro_batch_size", cfg.train.micro_batch_size);
      cfg.train.gradient_accumulation_steps =
          t.value("gradient_accumulation_steps", cfg.train.gradient_accumulation_steps);
      cfg.train.epochs = t.value("epochs", cfg.train.epochs);
      cfg.train.seed = t.value("seed", cfg.train.seed);
      cfg.train.lr_warmup_steps = t.value("lr_warmup_steps", cfg.train.lr_warmup_steps);
    }
    if (j.contains("eval")) {
      cfg.eval.unit = j.at("eval").value("unit", cfg.eval.unit);
      cfg.eval.every = j.at("eval").value("every", cfg.eval.every);
    }
    if (j.contains("monitor")) {
      cfg.monitor.csv_path = j.at("monitor").value("csv_path", cfg.monitor.csv_path);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return cfg;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_string(text);
}

std::string RunConfig::to_json_string() const {
  json j;
  j["model"] = model_to_json(model);
  j["parallel"] = {{"dp_size", parallel.dp_size},
                   {"tp_size", parallel.tp_size},
                   {"pp_size", parallel.pp_size},
                   {"zero_stage", parallel.zero_stage}};
  j["precision"] = {{"param_dtype_bytes", precision.param_dtype_bytes},
                    {"grad_dtype_bytes", precision.grad_dtype_bytes},
                    {"master_copy", precision.master_copy}};
  j["optimizer"] = {{"kind", optim::kind_name(optimizer.kind)},
                    {"lr", optimizer.lr},
                    {"weight_decay", optimizer.weight_decay},
                    {"betas", {optimizer.beta1, optimizer.beta2, optimizer.beta3}},
                    {"eps", optimizer.eps},
                    {"adalomo_clip", optimizer.adalomo_clip},
                    {"sophia_rho", optimizer.sophia_rho},
                    {"update_interval", optimizer.update_interval}};
  if (optimizer.clip_threshold) j["optimizer"]["clip_threshold"] = *optimizer.clip_threshold;
  if (lora) {
    j["lora"] = {{"r", lora->r},
                 {"lora_alpha", lora->lora_alpha},
                 {"target_modules", lora->target_modules},
                 {"bias", lora->bias},
                 {"task_type", lora->task_type}};
  }
  j["train"] = {{"batch_size", train.batch_size},
                {"micro_batch_size", train.micro_batch_size},
                {"gradient_accumulation_steps", train.gradient_accumulation_steps},
                {"epochs", train.epochs},
                {"seed", train.seed},
                {"lr_warmup_steps", train.lr_warmup_steps}};
  j["eval"] = {{"unit", eval.unit}, {"every", eval.every}};
  j["monitor"] = {{"csv_path", monitor.csv_path}};
  return j.dump(2);
}

}  // namespace minicollie
