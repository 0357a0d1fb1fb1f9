// psec: desk-scale skill expansion and composition pipelines.

#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "psec/harness.hpp"

namespace {

using psec::RunConfig;
using psec::RunReport;

psec::json load_config(const std::string& config_path,
                       const std::vector<std::string>& overrides) {
  psec::json cfg = psec::json::object();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw std::runtime_error("cannot read config " + config_path);
    cfg = psec::json::parse(in);
  }
  for (const std::string& kv : overrides) psec::apply_override(cfg, kv);
  return cfg;
}

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON config file");
    app->add_option("--set", overrides, "override config keys (key=value)")
        ->take_all();
  }

  RunConfig resolve() const { return RunConfig::from_json(load_config(config_path, overrides)); }
};

void print_summary(const RunReport& report) {
  psec::json out;
  out["command"] = report.body["command"];
  out["content_hash"] = report.body["content_hash"];
  if (report.body.contains("metrics")) out["metrics"] = report.body["metrics"];
  if (report.body.contains("final_loss")) out["final_loss"] = report.body["final_loss"];
  std::cout << out.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"parametric skill expansion and composition lab"};
  app.require_subcommand(1);

  CommonOpts gen_opts, pre_opts, skill_opts, comp_opts, eval_opts, cmp_opts, feat_opts;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen_opts.attach(gen);
  auto* pre = app.add_subcommand("pretrain", "train the base diffusion policy");
  pre_opts.attach(pre);
  auto* skill = app.add_subcommand("train-skill", "train a LoRA skill adapter");
  skill_opts.attach(skill);
  auto* comp = app.add_subcommand("train-composer", "train a context-aware composer");
  comp_opts.attach(comp);
  auto* evalc = app.add_subcommand("eval", "evaluate a composed or fixed policy");
  eval_opts.attach(evalc);
  auto* cmp = app.add_subcommand("compare", "mode/rank comparison sweep");
  cmp_opts.attach(cmp);
  auto* feat = app.add_subcommand("dump-features", "dump mid-layer features per skill");
  feat_opts.attach(feat);

  auto* skills = app.add_subcommand("skills", "manage a skill library");
  skills->require_subcommand(1);
  std::string lib_dir, skill_name, adapter_file;
  std::size_t add_rank = 8;
  double add_scale = 16.0;
  auto* ls = skills->add_subcommand("ls", "list skills");
  ls->add_option("library", lib_dir, "library directory")->required();
  auto* add = skills->add_subcommand("add", "add an adapter checkpoint as a skill");
  add->add_option("library", lib_dir, "library directory")->required();
  add->add_option("--name", skill_name, "skill name")->required();
  add->add_option("--file", adapter_file, "adapter .bin file")->required();
  add->add_option("--rank", add_rank, "adapter rank");
  add->add_option("--scale", add_scale, "adapter scale");
  auto* rm = skills->add_subcommand("rm", "remove a skill");
  rm->add_option("library", lib_dir, "library directory")->required();
  rm->add_option("--name", skill_name, "skill name")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      print_summary(psec::cmd_gen_data(gen_opts.resolve()));
    } else if (pre->parsed()) {
      print_summary(psec::cmd_pretrain(pre_opts.resolve()));
    } else if (skill->parsed()) {
      print_summary(psec::cmd_train_skill(skill_opts.resolve()));
    } else if (comp->parsed()) {
      print_summary(psec::cmd_train_composer(comp_opts.resolve()));
    } else if (evalc->parsed()) {
      print_summary(psec::cmd_eval(eval_opts.resolve()));
    } else if (cmp->parsed()) {
      print_summary(psec::cmd_compare(cmp_opts.resolve()));
    } else if (feat->parsed()) {
      print_summary(psec::cmd_dump_features(feat_opts.resolve()));
    } else if (skills->parsed()) {
      psec::SkillLibrary lib = psec::load_library(lib_dir);
      if (ls->parsed()) {
        psec::json out = psec::json::array();
        for (const auto& e : lib.entries) {
          out.push_back({{"name", e.name},
                         {"rank", e.adapter.rank},
                         {"scale", e.adapter.scale},
                         {"dataset", e.provenance.dataset_id},
                         {"weight_fn", e.provenance.weight_kind},
                         {"steps", e.provenance.steps},
                         {"seed", e.provenance.seed},
                         {"final_loss", e.provenance.final_loss}});
        }
        std::cout << out.dump(2) << "\n";
      } else if (add->parsed()) {
        psec::ParamStore p = psec::read_param_file(adapter_file);
        psec::SkillEntry e;
        e.name = skill_name;
        e.adapter.rank = add_rank;
        e.adapter.scale = add_scale;
        for (std::size_t l = 0; l < lib.base.spec.num_layers(); ++l) {
          e.adapter.b_mats.push_back(p.at("layer" + std::to_string(l) + ".B"));
          e.adapter.a_mats.push_back(p.at("layer" + std::to_string(l) + ".A"));
        }
        e.provenance.dataset_id = adapter_file;
        e.provenance.weight_kind = "external";
        e.created_at = "import";
        lib.add_skill(std::move(e));
        psec::save_library(lib, lib_dir);
        std::cout << "{\"added\": \"" << skill_name << "\"}\n";
      } else if (rm->parsed()) {
        lib.remove_skill(skill_name);
        psec::save_library(lib, lib_dir);
        std::cout << "{\"removed\": \"" << skill_name << "\"}\n";
      }
    }
  } catch (const std::exception& e) {
    psec::json err;
    err["error"] = e.what();
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return 0;
}
