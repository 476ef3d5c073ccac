#pragma once

// One flat `key = value` record for a whole experiment: data generation,
// model, training and evaluation settings.

#include <cstdint>
#include <string>

#include "facseq/config.hpp"
#include "facseq/data.hpp"
#include "facseq/evaluation.hpp"
#include "facseq/model.hpp"
#include "facseq/training.hpp"

namespace facseq {

inline KeyValueDoc to_doc(const SpriteWorldConfig& c) {
  KeyValueDoc d;
  d.set("data.n_sprites", c.n_sprites);
  d.set("data.sprite_size", c.sprite_size);
  d.set("data.channels", c.channels);
  d.set("data.height", c.height);
  d.set("data.width", c.width);
  d.set("data.seq_len", c.seq_len);
  d.set("data.speed_min", c.speed_min);
  d.set("data.speed_max", c.speed_max);
  d.set("data.one_sprite_per_channel", c.one_sprite_per_channel);
  return d;
}

inline SpriteWorldConfig sprite_world_from_doc(const KeyValueDoc& d, SpriteWorldConfig c = SpriteWorldConfig()) {
  c.n_sprites = d.get("data.n_sprites", c.n_sprites);
  c.sprite_size = d.get("data.sprite_size", c.sprite_size);
  c.channels = d.get("data.channels", c.channels);
  c.height = d.get("data.height", c.height);
  c.width = d.get("data.width", c.width);
  c.seq_len = d.get("data.seq_len", c.seq_len);
  c.speed_min = d.get("data.speed_min", c.speed_min);
  c.speed_max = d.get("data.speed_max", c.speed_max);
  c.one_sprite_per_channel = d.get_bool("data.one_sprite_per_channel", c.one_sprite_per_channel);
  return c;
}

inline KeyValueDoc to_doc(const MiSettings& s) {
  KeyValueDoc d;
  d.set("eval.ksg_k", s.ksg_k);
  d.set("eval.mi_pairs", s.mi_pairs);
  d.set("eval.partition_trials", s.partition_trials);
  d.set("eval.groups", s.groups);
  return d;
}

inline MiSettings mi_settings_from_doc(const KeyValueDoc& d, MiSettings s = MiSettings()) {
  s.ksg_k = d.get("eval.ksg_k", s.ksg_k);
  s.mi_pairs = d.get("eval.mi_pairs", s.mi_pairs);
  s.partition_trials = d.get("eval.partition_trials", s.partition_trials);
  s.groups = d.get("eval.groups", s.groups);
  if (s.ksg_k < 1) throw ConfigError("eval.ksg_k must be >= 1");
  if (s.partition_trials == 0) throw ConfigError("eval.partition_trials must be >= 1");
  return s;
}

struct ExperimentConfig {
  SpriteWorldConfig data;
  std::size_t sequences = 2000;
  std::uint64_t data_seed = 0;
  ModelConfig model;
  std::uint64_t init_seed = 0;
  TrainConfig train;
  MiSettings eval;
  std::uint64_t eval_seed = 0;

  KeyValueDoc to_doc() const {
    KeyValueDoc d = facseq::to_doc(data);
    d.set("data.sequences", sequences);
    d.set("data.seed", data_seed);
    d.merge(model.to_doc());
    d.set("model.init_seed", init_seed);
    d.merge(train.to_doc());
    d.merge(facseq::to_doc(eval));
    d.set("eval.seed", eval_seed);
    return d;
  }

  static ExperimentConfig from_doc(const KeyValueDoc& d) {
    ExperimentConfig c;
    c.data = sprite_world_from_doc(d);
    c.sequences = d.get("data.sequences", c.sequences);
    c.data_seed = d.get("data.seed", c.data_seed);
    c.model = ModelConfig::from_doc(d);
    c.init_seed = d.get("model.init_seed", c.init_seed);
    c.train = TrainConfig::from_doc(d);
    c.eval = mi_settings_from_doc(d);
    c.eval_seed = d.get("eval.seed", c.eval_seed);
    const KeyValueDoc known = c.to_doc();
    for (const auto& [key, value] : d.entries()) {
      if (!known.has(key)) throw ConfigError("unknown config key '" + key + "'");
    }
    return c;
  }
};

}  // namespace facseq
