// SPDX-License-Identifier: Apache-2.0
#include "dynvla/zoo.hpp"

#include "dynvla/config.hpp"
#include "dynvla/io.hpp"
#include "dynvla/util.hpp"

#include <chrono>
#include <sstream>

namespace dynvla {

using nlohmann::json;

json to_json(const ModelSpec& s) {
  json j{{"id", s.id},
         {"family", family_name(s.family)},
         {"image_side", s.image_side},
         {"channels", s.channels},
         {"patch", s.patch},
         {"vision_depth", s.vision_depth},
         {"connector_depth", s.connector_depth},
         {"lm_depth", s.lm_depth},
         {"d_vision", s.d_vision},
         {"d_lm", s.d_lm},
         {"vision_heads", s.vision_heads},
         {"heads", s.heads},
         {"mlp_ratio", s.mlp_ratio},
         {"max_text", s.max_text},
         {"injection_layer", s.injection_layer},
         {"alphabet", s.alphabet},
         {"init_seed", s.init_seed}};
  if (s.query_tokens) j["query_tokens"] = *s.query_tokens;
  return j;
}

ModelSpec model_spec_from_json(const json& j) {
  ModelSpec s;
  try {
    s.id = j.at("id").get<std::string>();
    s.family = parse_family(j.at("family").get<std::string>());
    s.image_side = j.at("image_side").get<int>();
    s.channels = j.at("channels").get<int>();
    s.patch = j.at("patch").get<int>();
    s.vision_depth = j.at("vision_depth").get<int>();
    s.connector_depth = j.at("connector_depth").get<int>();
    s.lm_depth = j.at("lm_depth").get<int>();
    s.d_vision = j.at("d_vision").get<int>();
    s.d_lm = j.at("d_lm").get<int>();
    s.vision_heads = j.at("vision_heads").get<int>();
    s.heads = j.at("heads").get<int>();
    s.mlp_ratio = j.at("mlp_ratio").get<int>();
    s.max_text = j.at("max_text").get<int>();
    s.injection_layer = j.at("injection_layer").get<int>();
    s.alphabet = j.at("alphabet").get<std::string>();
    s.init_seed = j.at("init_seed").get<std::uint64_t>();
    if (j.contains("query_tokens")) s.query_tokens = j.at("query_tokens").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad model spec: ") + e.what());
  }
  s.validate();
  return s;
}

ZooPlan default_zoo_plan() {
  ZooPlan plan;
  plan.donor.id = "vision-donor";
  plan.donor.family = Family::CrossAttn;
  plan.donor.query_tokens = 8;
  plan.donor.init_seed = 1;
  plan.pretrain.epochs = 200;
  plan.donor_training.epochs = 40;
  plan.donor_training.sign_fraction = 1.0;
  plan.donor_training.freeze_vision = false;
  plan.member_training.epochs = 30;
  plan.member_training.sign_fraction = 1.0;
  plan.donor_training.scramble_fraction = 0.1;
  plan.member_training.scramble_fraction = 0.1;

  auto variant = [&](const char* id, Family family, int d_lm, int lm_depth, int heads, int connector_depth,
                     std::uint64_t seed) {
    ZooVariant v;
    v.spec.id = id;
    v.spec.family = family;
    v.spec.d_lm = d_lm;
    v.spec.lm_depth = lm_depth;
    v.spec.heads = heads;
    v.spec.connector_depth = connector_depth;
    if (family == Family::CrossAttn) v.spec.query_tokens = 8;
    v.spec.init_seed = seed;
    v.train_seed = seed + 1000;
    plan.variants.push_back(v);
  };
  variant("cross-a", Family::CrossAttn, 32, 2, 2, 1, 101);
  variant("cross-b", Family::CrossAttn, 64, 2, 4, 1, 102);
  variant("cross-c", Family::CrossAttn, 32, 3, 2, 2, 103);
  variant("mlp-a", Family::MlpProj, 32, 2, 2, 1, 201);
  variant("mlp-b", Family::MlpProj, 64, 2, 4, 1, 202);
  variant("mlp-c", Family::MlpProj, 32, 3, 2, 1, 203);
  return plan;
}

namespace {

std::string elapsed_since(std::chrono::steady_clock::time_point t0) {
  std::ostringstream os;
  os.precision(1);
  os << std::fixed << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << "s";
  return os.str();
}

json save_member(const std::filesystem::path& dir, const ModelBundle& bundle, double accuracy) {
  const std::string file = bundle.spec.id + ".dvna";
  write_named_arrays(dir / file, NamedArrays(bundle.parameters.begin(), bundle.parameters.end()));
  return json{{"spec", to_json(bundle.spec)},
              {"file", file},
              {"hash", hex64(file_hash(dir / file))},
              {"heldout_accuracy", accuracy}};
}

ModelBundle load_member(const std::filesystem::path& dir, const json& entry) {
  ModelBundle bundle = init_model(model_spec_from_json(entry.at("spec")));
  const std::string file = entry.at("file").get<std::string>();
  const std::string want = entry.at("hash").get<std::string>();
  const std::string got = hex64(file_hash(dir / file));
  if (got != want) throw ConfigError("parameter file " + (dir / file).string() + " hash " + got + " != manifest " + want);
  NamedArrays arrays = read_named_arrays(dir / file);
  for (auto& [name, m] : bundle.parameters) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw ConfigError("parameter '" + name + "' missing from " + file);
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
      throw ConfigError("parameter '" + name + "' in " + file + " has the wrong shape");
    m = it->second;
  }
  bundle.frozen = true;
  return bundle;
}

}  // namespace

namespace {

json training_json(const TrainOptions& o) {
  return json{{"epochs", o.epochs},
              {"train_seed", o.train_seed},
              {"learning_rate", o.learning_rate},
              {"batch_size", o.batch_size},
              {"warmup_steps", o.warmup_steps},
              {"grad_clip", o.grad_clip},
              {"sign_fraction", o.sign_fraction},
              {"scramble_fraction", o.scramble_fraction},
              {"scramble_answer", o.scramble_answer},
              {"freeze_vision", o.freeze_vision}};
}

json pretrain_json(const VisionPretrainOptions& o) {
  return json{{"epochs", o.epochs}, {"images_per_epoch", o.images_per_epoch}, {"seed", o.seed},
              {"learning_rate", o.learning_rate}, {"batch_size", o.batch_size}};
}

// Finds an entry of the previous manifest that was produced by exactly this recipe.
const json* reusable(const json& previous, const std::filesystem::path& dir, const json& spec, const json& training) {
  if (!previous.is_object()) return nullptr;
  std::vector<const json*> entries;
  if (previous.contains("donor")) entries.push_back(&previous.at("donor"));
  if (previous.contains("models"))
    for (const auto& e : previous.at("models")) entries.push_back(&e);
  for (const json* e : entries) {
    if (!e->contains("spec") || e->at("spec") != spec || !e->contains("training") || e->at("training") != training)
      continue;
    const auto file = dir / e->at("file").get<std::string>();
    if (std::filesystem::exists(file) && hex64(file_hash(file)) == e->at("hash").get<std::string>()) return e;
  }
  return nullptr;
}

}  // namespace

ZooTrainResult train_zoo(const std::filesystem::path& dir, const ZooPlan& plan,
                         const std::function<void(const std::string&)>& log, bool force) {
  if (plan.variants.size() < 2) throw std::invalid_argument("a zoo needs at least two variants");
  for (const ZooVariant& v : plan.variants)
    if (v.spec.d_vision != plan.donor.d_vision || v.spec.vision_depth != plan.donor.vision_depth ||
        v.spec.patch != plan.donor.patch || v.spec.image_side != plan.donor.image_side)
      throw std::invalid_argument("variant '" + v.spec.id + "' cannot share the donor's vision encoder");
  std::filesystem::create_directories(dir);
  auto note = [&](const std::string& line) {
    if (log) log(line);
  };
  json previous;
  if (!force && std::filesystem::exists(dir / kZooManifestName)) {
    try {
      previous = json::parse(read_text(dir / kZooManifestName));
    } catch (const json::parse_error&) {
      previous = json();
    }
  }
  const auto t0 = std::chrono::steady_clock::now();
  const Corpus corpus = generate_corpus(plan.corpus_size, plan.corpus_seed);
  ZooTrainResult result;

  json manifest{{"version", 1},
                {"complete", false},
                {"corpus", {{"size", plan.corpus_size}, {"seed", plan.corpus_seed}}},
                {"models", json::array()}};
  auto flush = [&] { write_text(dir / kZooManifestName, manifest.dump(2) + "\n"); };

  TrainOptions donor_opts = plan.donor_training;
  donor_opts.freeze_vision = false;
  donor_opts.min_accuracy = 0;
  json donor_training = training_json(donor_opts);
  donor_training["pretrain"] = pretrain_json(plan.pretrain);
  ModelBundle donor;
  if (const json* e = reusable(previous, dir, to_json(plan.donor), donor_training)) {
    donor = load_member(dir, *e);
    manifest["donor"] = *e;
    result.reused.push_back(plan.donor.id);
    note("donor '" + plan.donor.id + "' reused");
  } else {
    const ModelBundle probe = pretrain_vision(plan.donor, plan.pretrain);
    note("vision pretraining done (" + elapsed_since(t0) + ")");
    donor_opts.vision_donor = &probe;
    const TrainedModel trained = train_toy_model(plan.donor, corpus, donor_opts);
    donor = trained.bundle;
    manifest["donor"] = save_member(dir, donor, trained.heldout_accuracy);
    manifest["donor"]["training"] = donor_training;
    note("donor '" + plan.donor.id + "' accuracy " + std::to_string(trained.heldout_accuracy) + " (" +
         elapsed_since(t0) + ")");
  }
  flush();

  for (const ZooVariant& v : plan.variants) {
    TrainOptions opts = plan.member_training;
    opts.train_seed = v.train_seed;
    opts.freeze_vision = true;
    opts.min_accuracy = 0;
    const json training = training_json(opts);
    json entry;
    if (const json* e = reusable(previous, dir, to_json(v.spec), training)) {
      entry = *e;
      result.reused.push_back(v.spec.id);
      note("model '" + v.spec.id + "' reused");
    } else {
      opts.vision_donor = &donor;
      const TrainedModel m = train_toy_model(v.spec, corpus, opts);
      entry = save_member(dir, m.bundle, m.heldout_accuracy);
      entry["training"] = training;
      entry["vision_from"] = plan.donor.id;
      note("model '" + v.spec.id + "' accuracy " + std::to_string(m.heldout_accuracy) + " (" + elapsed_since(t0) +
           ")");
    }
    const double acc = entry.at("heldout_accuracy").get<double>();
    result.accuracy.emplace_back(v.spec.id, acc);
    if (acc < plan.member_training.min_accuracy) result.below_bar.push_back(v.spec.id);
    manifest["models"].push_back(entry);
    flush();
  }
  manifest["complete"] = true;
  flush();
  result.zoo = load_zoo(dir);
  return result;
}

Zoo load_zoo(const std::filesystem::path& dir) {
  const auto path = dir / kZooManifestName;
  if (!std::filesystem::exists(path)) throw ConfigError("no zoo manifest at " + path.string());
  const std::string text = read_text(path);
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  if (!manifest.value("complete", false)) throw ConfigError("zoo in " + dir.string() + " is incomplete; rerun zoo-train");
  Zoo zoo;
  zoo.manifest_hash = fnv1a64(text);
  for (const auto& entry : manifest.at("models")) zoo.models.push_back(load_member(dir, entry));
  return zoo;
}

Corpus zoo_corpus(const std::filesystem::path& dir) {
  const json manifest = json::parse(read_text(dir / kZooManifestName));
  return generate_corpus(manifest.at("corpus").at("size").get<int>(),
                         manifest.at("corpus").at("seed").get<std::uint64_t>());
}

}  // namespace dynvla
