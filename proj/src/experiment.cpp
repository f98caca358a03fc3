#include "fundus/experiment.hpp"

#include <fstream>

namespace fundus {

CnnConfig cnn_preset_by_name(const std::string& name) {
  if (name == "desk") return CnnConfig::desk();
  if (name == "tiny") return CnnConfig::tiny();
  if (name == "b0") return CnnConfig::b0();
  throw ConfigError("unknown cnn preset '" + name + "' (desk, tiny, b0)");
}

ViTConfig vit_preset_by_name(const std::string& name) {
  if (name == "desk") return ViTConfig::desk();
  if (name == "tiny") return ViTConfig::tiny();
  if (name == "b16") return ViTConfig::b16();
  throw ConfigError("unknown vit preset '" + name + "' (desk, tiny, b16)");
}

ModelConfig ExperimentConfig::model_config() const {
  ModelConfig m;
  m.image_size = kImageSize;  // the pipeline always produces 224x224
  m.variant = variant;
  m.cnn = cnn;
  m.vit = vit;
  m.fusion = fusion;
  return m;
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["threads"] = threads;
  j["variant"] = variant_name(variant);
  nlohmann::json roots = nlohmann::json::array();
  for (const auto& r : data_roots) {
    roots.push_back({{"path", r.path}, {"layout", source_name(r.layout)}});
  }
  j["data"] = roots;

  nlohmann::json jc;
  jc["preset"] = cnn_preset;
  jc["stem_channels"] = cnn.stem_channels;
  jc["feature_channels"] = cnn.feature_channels;
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : cnn.stages) {
    stages.push_back({{"expansion", s.expansion},
                      {"out_channels", s.out_channels},
                      {"kernel", s.kernel},
                      {"stride", s.stride},
                      {"repeats", s.repeats},
                      {"se_ratio", s.se_ratio}});
  }
  jc["stages"] = stages;
  j["cnn"] = jc;

  j["vit"] = {{"preset", vit_preset},       {"patch", vit.patch},
              {"dim", vit.dim},             {"heads", vit.heads},
              {"depth", vit.depth},         {"mlp_ratio", vit.mlp_ratio},
              {"use_cls_token", vit.use_cls_token}};
  j["fusion"] = {{"dim", fusion.dim},
                 {"heads", fusion.heads},
                 {"head_hidden", fusion.head_hidden},
                 {"dropout", fusion.dropout},
                 {"query_from_vit", fusion.query_from_vit},
                 {"pooling", fusion.max_pool ? "max" : "mean"}};
  j["train"] = train;
  j["augment"] = augment;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.seed = j.value("seed", c.seed);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.threads = j.value("threads", c.threads);
  if (j.contains("variant")) c.variant = variant_from_name(j.at("variant").get<std::string>());
  if (j.contains("data")) {
    c.data_roots.clear();
    for (const auto& r : j.at("data")) {
      DataRoot root;
      root.path = r.at("path").get<std::string>();
      root.layout = source_from_name(r.value("layout", std::string("SYNTHETIC")));
      c.data_roots.push_back(std::move(root));
    }
  }
  if (j.contains("cnn")) {
    const auto& jc = j.at("cnn");
    c.cnn_preset = jc.value("preset", c.cnn_preset);
    c.cnn = cnn_preset_by_name(c.cnn_preset);
    c.cnn.stem_channels = jc.value("stem_channels", c.cnn.stem_channels);
    c.cnn.feature_channels = jc.value("feature_channels", c.cnn.feature_channels);
    if (jc.contains("stages")) {
      c.cnn.stages.clear();
      for (const auto& s : jc.at("stages")) {
        StageSpec st;
        st.expansion = s.value("expansion", st.expansion);
        st.out_channels = s.value("out_channels", st.out_channels);
        st.kernel = s.value("kernel", st.kernel);
        st.stride = s.value("stride", st.stride);
        st.repeats = s.value("repeats", st.repeats);
        st.se_ratio = s.value("se_ratio", st.se_ratio);
        c.cnn.stages.push_back(st);
      }
    }
  }
  if (j.contains("vit")) {
    const auto& jv = j.at("vit");
    c.vit_preset = jv.value("preset", c.vit_preset);
    c.vit = vit_preset_by_name(c.vit_preset);
    c.vit.patch = jv.value("patch", c.vit.patch);
    c.vit.dim = jv.value("dim", c.vit.dim);
    c.vit.heads = jv.value("heads", c.vit.heads);
    c.vit.depth = jv.value("depth", c.vit.depth);
    c.vit.mlp_ratio = jv.value("mlp_ratio", c.vit.mlp_ratio);
    c.vit.use_cls_token = jv.value("use_cls_token", c.vit.use_cls_token);
  }
  if (j.contains("fusion")) {
    const auto& jf = j.at("fusion");
    c.fusion.dim = jf.value("dim", c.fusion.dim);
    c.fusion.heads = jf.value("heads", c.fusion.heads);
    c.fusion.head_hidden = jf.value("head_hidden", c.fusion.head_hidden);
    c.fusion.dropout = jf.value("dropout", c.fusion.dropout);
    c.fusion.query_from_vit = jf.value("query_from_vit", c.fusion.query_from_vit);
    c.fusion.max_pool = jf.value("pooling", std::string("mean")) == "max";
  }
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("augment")) c.augment = j.at("augment").get<AugmentationConfig>();
  return c;
}

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void ExperimentConfig::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write config file: " + path);
  out << to_json().dump(2) << "\n";
}

}  // namespace fundus
