#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "sentlab/harness.hpp"

using namespace sentlab;

namespace {

std::vector<Query> tiny_dataset(int count, std::uint64_t seed) {
  GeneratorSpec gen;
  gen.count = count;
  return generate_dataset(gen, seed);
}

TrainConfig tiny_config(ObjectiveMode mode, int steps, std::uint64_t seed) {
  TrainConfig c;
  c.objective = BaselineConfig::defaults_for(mode);
  c.total_steps = steps;
  c.queries_per_step = 2;
  c.group_size = 4;
  c.max_response_length = 12;
  c.seed = seed;
  c.warm_start.demos_per_query = 4;
  c.warm_start.passes = 2;
  return c;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name)
      : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

}  // namespace

TEST_CASE("warm start concentrates easy queries more than hard ones") {
  const auto dataset = tiny_dataset(30, 5);
  TabularPolicy p(GeneratorSpec{}.vocab, 2);
  WarmStartConfig w;
  w.correct_prob_by_steps = {0.95, 0.6, 0.3};
  warm_start(p, dataset, w, 5);
  // mean semantic entropy of 1-step queries should fall below 3-step queries
  TrainConfig c = tiny_config(ObjectiveMode::kGrpo, 0, 5);
  const auto profiles = profile_dataset(p, dataset, c);
  double easy = 0.0, hard = 0.0;
  int n_easy = 0, n_hard = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].difficulty_meta.steps == 1) {
      easy += profiles[i].se;
      ++n_easy;
    } else if (dataset[i].difficulty_meta.steps == 3) {
      hard += profiles[i].se;
      ++n_hard;
    }
  }
  REQUIRE(n_easy > 0);
  REQUIRE(n_hard > 0);
  CHECK(easy / n_easy < hard / n_hard);
}

TEST_CASE("train with zero steps is a no-op") {
  const auto dataset = tiny_dataset(6, 6);
  TrainConfig c = tiny_config(ObjectiveMode::kGrpo, 0, 6);
  TabularPolicy p(c.vocab, c.context_window);
  warm_start(p, dataset, c.warm_start, c.seed);
  const TabularPolicy before = p;
  const auto result = train(p, dataset, identity_plan(dataset), c);
  CHECK(result.metrics.empty());
  CHECK(result.completed_steps == 0);
  REQUIRE(p.num_states() == before.num_states());
  for (int s = 0; s < before.num_states(); ++s) {
    const auto a = p.logits_row(s);
    const auto b = before.logits_row(s);
    for (std::size_t v = 0; v < a.size(); ++v) CHECK(a[v] == b[v]);
  }
}

TEST_CASE("deterministic mode: identical config and seed give identical CSVs") {
  const auto dataset = tiny_dataset(8, 7);
  TrainConfig c = tiny_config(ObjectiveMode::kSent, 10, 7);
  std::string csvs[2];
  for (int run = 0; run < 2; ++run) {
    TabularPolicy p(c.vocab, c.context_window);
    warm_start(p, dataset, c.warm_start, c.seed);
    const auto profiles = profile_dataset(p, dataset, c);
    const auto plan = build_curriculum(dataset, profiles, c.curriculum_stages);
    const auto result = train(p, dataset, plan, c);
    TempDir tmp("sentlab_determinism");
    write_metrics_csv(tmp / "metrics.csv", result.metrics);
    csvs[run] = read_file(tmp / "metrics.csv");
  }
  CHECK(csvs[0] == csvs[1]);
  CHECK(!csvs[0].empty());
}

TEST_CASE("stage bookkeeping matches the plan boundaries") {
  const auto dataset = tiny_dataset(8, 8);
  TrainConfig c = tiny_config(ObjectiveMode::kGrpo, 6, 8);
  c.curriculum_stages = 2;
  TabularPolicy p(c.vocab, c.context_window);
  warm_start(p, dataset, c.warm_start, c.seed);
  const auto profiles = profile_dataset(p, dataset, c);
  const auto plan = build_curriculum(dataset, profiles, 2);
  // every training query appears in exactly one stage
  std::vector<int> seen;
  for (int stage = 0; stage < plan.stages; ++stage) {
    const auto [b, e] = plan.stage_range(stage);
    for (std::size_t i = b; i < e; ++i) seen.push_back(plan.ordered_ids[i]);
  }
  CHECK(seen.size() == dataset.size());
  std::sort(seen.begin(), seen.end());
  CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());

  const auto result = train(p, dataset, plan, c);
  REQUIRE(result.metrics.size() == 6);
  for (const MetricsRow& row : result.metrics)
    CHECK(row.stage == (row.step < 3 ? 0 : 1));
}

TEST_CASE("SENT with zero betas reproduces the GRPO beta-0 trajectory") {
  const auto dataset = tiny_dataset(8, 9);
  std::vector<std::string> csvs;
  for (int which = 0; which < 2; ++which) {
    TrainConfig c = tiny_config(
        which == 0 ? ObjectiveMode::kSent : ObjectiveMode::kGrpo, 8, 9);
    c.beta_low = 0.0;
    c.beta_high = 0.0;
    c.objective.kl_beta = 0.0;
    TabularPolicy p(c.vocab, c.context_window);
    warm_start(p, dataset, c.warm_start, c.seed);
    const auto result = train(p, dataset, identity_plan(dataset), c);
    TempDir tmp("sentlab_sent_grpo");
    write_metrics_csv(tmp / "m.csv", result.metrics);
    csvs.push_back(read_file(tmp / "m.csv"));
  }
  CHECK(csvs[0] == csvs[1]);
}

TEST_CASE("metrics CSV schema is pinned") {
  CHECK(std::string(kMetricsSchemaLine) == "# sentlab-metrics v1");
  CHECK(std::string(kMetricsHeaderLine) ==
        "step,stage,mean_entropy,mean_reward,mean_resp_len,objective,"
        "low_count,high_cov_count,mean_low_entropy,mean_high_cov,term1,term2");
  MetricsRow r;
  r.step = 3;
  r.stage = 1;
  r.mean_entropy = 0.5;
  const std::string line = metrics_row_to_csv(r);
  CHECK(line.substr(0, 10) == "3,1,0.5,0,");
}

TEST_CASE("non-finite parameters abort training and restore the checkpoint") {
  const auto dataset = tiny_dataset(4, 10);
  TrainConfig c = tiny_config(ObjectiveMode::kGrpo, 5, 10);
  TabularPolicy p(c.vocab, c.context_window);
  warm_start(p, dataset, c.warm_start, c.seed);
  // corrupt one logit the first rollout will touch
  const int s0 = p.state_index(dataset[0], {});
  p.set_logit(s0, 0, std::numeric_limits<double>::infinity());
  const TabularPolicy before = p;
  const auto result = train(p, dataset, identity_plan(dataset), c);
  CHECK(result.aborted_non_finite);
  CHECK(result.completed_steps == 0);
  // restored to the entry checkpoint
  REQUIRE(p.num_states() >= before.num_states());
  const auto a = p.logits_row(s0);
  const auto b = before.logits_row(s0);
  for (std::size_t v = 0; v < a.size(); ++v) {
    if (std::isfinite(b[v]))
      CHECK(a[v] == b[v]);
    else
      CHECK(std::isinf(a[v]));
  }
}

TEST_CASE("evaluate") {
  const auto dataset = tiny_dataset(6, 11);
  GeneratorSpec gen;

  SUBCASE("deterministic-success policy scores 1.0 everywhere") {
    TabularPolicy p(gen.vocab, 2);
    for (const Query& q : dataset) {
      const int s0 = p.state_index(q, {});
      p.set_logit(s0, p.vocab().answer_delim, 60.0);
      std::vector<TokenId> pre{p.vocab().answer_delim};
      for (char ch : std::to_string(q.answer)) {
        const int s = p.state_index(q, pre);
        p.set_logit(s, static_cast<TokenId>(ch - '0'), 60.0);
        pre.push_back(static_cast<TokenId>(ch - '0'));
      }
      const int se = p.state_index(q, pre);
      p.set_logit(se, p.vocab().eos, 60.0);
    }
    const EvalSplit split = evaluate(p, dataset, {1, 4}, 11, 12);
    CHECK(split.pass_at_k.at(1) == 1.0);
    CHECK(split.pass_at_k.at(4) == 1.0);
    CHECK(split.avg_at_k.at(4) == 1.0);
    CHECK(split.len_at_k.at(4) >= 3.0);  // delim + >=1 digit + eos
  }

  SUBCASE("hopeless policy scores zero for every K") {
    TabularPolicy p(gen.vocab, 2);
    for (const Query& q : dataset) {
      const int s0 = p.state_index(q, {});
      p.set_logit(s0, p.vocab().eos, 60.0);  // immediate eos, no answer
    }
    const EvalSplit split = evaluate(p, dataset, {1, 2, 8}, 12, 12);
    for (int k : {1, 2, 8}) CHECK(split.pass_at_k.at(k) == 0.0);
  }

  SUBCASE("aggregation matches a replayed-stream oracle and pass@K is monotone") {
    TabularPolicy p(gen.vocab, 2);
    WarmStartConfig w;
    w.correct_prob_by_steps = {0.6, 0.4, 0.3};
    warm_start(p, dataset, w, 13);
    TabularPolicy replay = p;
    const std::vector<int> ks{1, 2, 4, 8};
    const EvalSplit split = evaluate(p, dataset, ks, 13, 12);

    // oracle: replay the same per-query streams and recompute from scratch
    for (int k : ks) {
      double pass = 0.0, avg = 0.0, len = 0.0;
      for (const Query& q : dataset) {
        auto rng = derive_rng(13, rng_tag::kEval, static_cast<std::uint64_t>(q.id));
        bool any = false;
        double hits = 0.0, tok = 0.0;
        for (int i = 0; i < 8; ++i) {
          const Response r = replay.sample_response(q, 12, 1.0, rng);
          if (i < k) {
            const double ok = verify(q, r, replay.vocab());
            any = any || ok > 0.5;
            hits += ok;
            tok += static_cast<double>(r.tokens.size());
          }
        }
        pass += any ? 1.0 : 0.0;
        avg += hits / k;
        len += tok / k;
      }
      const double nq = static_cast<double>(dataset.size());
      CHECK(split.pass_at_k.at(k) == doctest::Approx(pass / nq).epsilon(1e-12));
      CHECK(split.avg_at_k.at(k) == doctest::Approx(avg / nq).epsilon(1e-12));
      CHECK(split.len_at_k.at(k) == doctest::Approx(len / nq).epsilon(1e-12));
    }
    CHECK(split.pass_at_k.at(1) <= split.pass_at_k.at(2));
    CHECK(split.pass_at_k.at(2) <= split.pass_at_k.at(4));
    CHECK(split.pass_at_k.at(4) <= split.pass_at_k.at(8));
  }

  SUBCASE("K list validation") {
    TabularPolicy p(gen.vocab, 2);
    CHECK_THROWS_AS(evaluate(p, dataset, {}, 1, 8), std::invalid_argument);
    CHECK_THROWS_AS(evaluate(p, dataset, {0}, 1, 8), std::invalid_argument);
  }

  SUBCASE("report JSON carries exactly the requested K values") {
    TabularPolicy p(gen.vocab, 2);
    EvalReport report;
    report.splits.push_back(evaluate(p, dataset, {8, 16}, 14, 8));
    const json j = eval_report_to_json(report);
    CHECK(j["splits"][0]["k"] == json::array({8, 16}));
    CHECK(j["splits"][0]["pass_at_k"].size() == 2);
    CHECK(j["splits"][0]["pass_at_k"].contains("8"));
    CHECK(j["splits"][0]["pass_at_k"].contains("16"));
  }
}

TEST_CASE("file round trips") {
  TempDir tmp("sentlab_io");

  SUBCASE("dataset JSONL") {
    const auto dataset = tiny_dataset(10, 15);
    save_dataset_jsonl(tmp / "d.jsonl", dataset);
    const auto loaded = load_dataset_jsonl(tmp / "d.jsonl");
    REQUIRE(loaded.size() == dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      CHECK(loaded[i].id == dataset[i].id);
      CHECK(loaded[i].prompt_tokens == dataset[i].prompt_tokens);
      CHECK(loaded[i].answer == dataset[i].answer);
      CHECK(loaded[i].difficulty_meta.steps == dataset[i].difficulty_meta.steps);
      CHECK(loaded[i].difficulty_meta.modulus == dataset[i].difficulty_meta.modulus);
    }
  }

  SUBCASE("profiles and order") {
    const auto dataset = tiny_dataset(6, 16);
    TrainConfig c = tiny_config(ObjectiveMode::kGrpo, 0, 16);
    TabularPolicy p(c.vocab, c.context_window);
    warm_start(p, dataset, c.warm_start, c.seed);
    const auto profiles = profile_dataset(p, dataset, c);
    save_profiles_jsonl(tmp / "p.jsonl", profiles);
    const auto loaded = load_profiles_jsonl(tmp / "p.jsonl");
    REQUIRE(loaded.size() == profiles.size());
    for (std::size_t i = 0; i < profiles.size(); ++i) {
      CHECK(loaded[i].id == profiles[i].query_id);
      CHECK(loaded[i].se == doctest::Approx(profiles[i].se).epsilon(1e-12));
      CHECK(loaded[i].clusters == static_cast<int>(profiles[i].clusters.size()));
    }
    const auto plan = build_curriculum(dataset, profiles, 2);
    save_order(tmp / "order.txt", plan.ordered_ids);
    CHECK(load_order(tmp / "order.txt") == plan.ordered_ids);
  }

  SUBCASE("policy snapshot preserves distributions and sampling") {
    const auto dataset = tiny_dataset(4, 17);
    TrainConfig c = tiny_config(ObjectiveMode::kGrpo, 0, 17);
    TabularPolicy p(c.vocab, c.context_window);
    warm_start(p, dataset, c.warm_start, c.seed);
    save_policy(tmp / "policy.txt", p);
    TabularPolicy q = load_policy(tmp / "policy.txt");
    CHECK(q.num_states() == p.num_states());
    CHECK(q.context_window() == p.context_window());
    for (int s = 0; s < p.num_states(); ++s) {
      const auto a = p.logits_row(s), b = q.logits_row(s);
      for (std::size_t v = 0; v < a.size(); ++v) CHECK(a[v] == b[v]);
      CHECK(p.state_key(s).query_id == q.state_key(s).query_id);
      CHECK(p.state_key(s).window == q.state_key(s).window);
    }
    // loaded policy continues sampling identically
    auto r1 = derive_rng(99), r2 = derive_rng(99);
    const Response ra = p.sample_response(dataset[0], 12, 1.0, r1);
    const Response rb = q.sample_response(dataset[0], 12, 1.0, r2);
    CHECK(ra.tokens == rb.tokens);
  }
}

TEST_CASE("checkpoint files are written at the configured interval") {
  TempDir tmp("sentlab_ckpt");
  const auto dataset = tiny_dataset(6, 18);
  TrainConfig c = tiny_config(ObjectiveMode::kGrpo, 4, 18);
  c.checkpoint_interval = 2;
  c.checkpoint_path = tmp / "ckpt.txt";
  TabularPolicy p(c.vocab, c.context_window);
  warm_start(p, dataset, c.warm_start, c.seed);
  const auto result = train(p, dataset, identity_plan(dataset), c);
  CHECK(result.completed_steps == 4);
  REQUIRE(std::filesystem::exists(c.checkpoint_path));
  const TabularPolicy ckpt = load_policy(c.checkpoint_path);
  // the last checkpoint (after step 4) matches the final policy
  REQUIRE(ckpt.num_states() == p.num_states());
  for (int s = 0; s < p.num_states(); ++s) {
    const auto a = p.logits_row(s), b = ckpt.logits_row(s);
    for (std::size_t v = 0; v < a.size(); ++v)
      CHECK(a[v] == doctest::Approx(b[v]).epsilon(1e-15));
  }
}

TEST_CASE("multiple optimizer passes per batch are supported") {
  const auto dataset = tiny_dataset(6, 19);
  TrainConfig one = tiny_config(ObjectiveMode::kGrpo, 3, 19);
  TrainConfig two = tiny_config(ObjectiveMode::kGrpo, 3, 19);
  two.passes_per_batch = 2;
  double final_logit[2];
  int i = 0;
  for (const TrainConfig* c : {&one, &two}) {
    TabularPolicy p(c->vocab, c->context_window);
    warm_start(p, dataset, c->warm_start, c->seed);
    train(p, dataset, identity_plan(dataset), *c);
    final_logit[i++] = p.logits_row(0)[0];
  }
  CHECK(final_logit[0] != final_logit[1]);  // extra pass moves the parameters
}

TEST_CASE("token batch debug dump has the documented columns") {
  TempDir tmp("sentlab_dump");
  const auto dataset = tiny_dataset(2, 20);
  TabularPolicy p(GeneratorSpec{}.vocab, 2);
  auto rng = derive_rng(20);
  std::vector<RolloutGroup> groups{rollout_group(p, dataset[0], 2, 8, rng)};
  TokenBatch batch = build_token_batch(p, groups);
  apply_token_selection(batch, {}, 0.5, 2.0);
  write_batch_csv(tmp / "batch.csv", batch);
  std::ifstream f(tmp / "batch.csv");
  std::string header;
  std::getline(f, header);
  CHECK(header == std::string(kBatchCsvHeader));
  std::size_t rows = 0;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  CHECK(rows == batch.size());
}

TEST_CASE("evaluation reports are deterministic for identical config and seed") {
  const auto dataset = tiny_dataset(6, 21);
  std::string dumps[2];
  for (int run = 0; run < 2; ++run) {
    TabularPolicy p(GeneratorSpec{}.vocab, 2);
    WarmStartConfig w;
    warm_start(p, dataset, w, 21);
    EvalReport report;
    report.splits.push_back(evaluate(p, dataset, {2, 8}, 21, 12));
    dumps[run] = eval_report_to_json(report).dump();
  }
  CHECK(dumps[0] == dumps[1]);
  CHECK(!dumps[0].empty());
}
