//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

// `semla` command-line driver: train, sample, eval, align, bench-latent, synth.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include <CLI11.hpp>

#include "semla/align.h"
#include "semla/bench.h"
#include "semla/checkpoint.h"
#include "semla/flow.h"
#include "semla/metrics.h"
#include "semla/sampler.h"
#include "semla/sdf.h"
#include "semla/synthetic.h"

#ifndef SEMLA_VERSION
#define SEMLA_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace semla;

namespace {
enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// Bad flag combinations discovered after parsing.
struct UsageError: std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

std::size_t thread_budget() {
  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  const char *env = std::getenv("SEMLA_THREADS");
  if (!env || !*env)
    return hw;
  char *end = nullptr;
  const unsigned long cap = std::strtoul(env, &end, 10);
  if (*end != '\0' || cap == 0)
    throw UsageError("SEMLA_THREADS must be a positive integer");
  return std::min<std::size_t>(hw, cap);
}

std::string quote(const std::string &arg) {
  if (!arg.empty() && arg.find_first_of(" \t\"'\\$") == std::string::npos)
    return arg;
  std::string q = "'";
  for (char c: arg)
    q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

// One append-only block of key = value lines, optionally followed by a
// verbatim config snapshot.
class Manifest {
public:
  Manifest(const std::string &command, int argc, char **argv) {
    add("command", command);
    add("version", SEMLA_VERSION);
    std::string line;
    for (int i = 0; i < argc; ++i)
      line += (i ? " " : "") + quote(argv[i]);
    add("argv", line);
    add("cwd", fs::current_path().string());
    const std::time_t now = std::time(nullptr);
    std::tm utc {};
    gmtime_r(&now, &utc);
    std::ostringstream ts;
    ts << std::put_time(&utc, "%Y-%m-%dT%H:%M:%SZ");
    add("started_utc", ts.str());
  }

  void add(const std::string &key, const std::string &value) {
    lines_ += key + " = " + value + '\n';
  }
  void add(const std::string &key, double value) { add(key, fmt(value)); }
  void add(const std::string &key, std::size_t value) {
    add(key, std::to_string(value));
  }
  void set_config(std::string text) { config_ = std::move(text); }

  void append_to(const std::string &path) const {
    std::ofstream out(path, std::ios::app | std::ios::binary);
    if (!out)
      throw std::runtime_error("cannot open '" + path + "' for appending");
    out << "[run]\n" << lines_;
    if (!config_.empty())
      out << "[config]\n" << config_;
    out << '\n';
    if (!out)
      throw std::runtime_error("failed writing '" + path + "'");
  }

private:
  std::string lines_, config_;
};

// Last value of `key` in a manifest file, if any.
std::optional<std::string> manifest_value(const std::string &path,
                                          const std::string &key) {
  std::ifstream in(path);
  std::optional<std::string> found;
  const std::string prefix = key + " = ";
  for (std::string line; std::getline(in, line);)
    if (line.rfind(prefix, 0) == 0)
      found = line.substr(prefix.size());
  return found;
}

std::vector<Molecule> read_corpus(const std::string &path,
                                  const Vocabulary &vocab) {
  try {
    return read_sdf_subset(read_text_file(path), vocab);
  } catch (const SdfParseError &e) {
    throw SdfParseError(e.line(), path + ": " + e.what());
  }
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string data, out = "run", config, resume;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps, atoms_per_batch, checkpoint_every;
  std::optional<bool> self_cond;
};

int cmd_train(const TrainArgs &a, int argc, char **argv) {
  const Vocabulary vocab = Vocabulary::default_toy();
  const std::vector<Molecule> corpus = read_corpus(a.data, vocab);
  if (corpus.empty())
    throw std::invalid_argument(a.data + ": no molecules");

  std::optional<Trainer> trainer;
  std::uint64_t resumed_crc = 0;
  if (!a.resume.empty()) {
    const std::string bytes = read_text_file(a.resume);
    const Checkpoint ckpt = decode_checkpoint(bytes);
    if (ckpt.vocab != vocab)
      throw CheckpointError(a.resume + ": vocabulary differs from the data's");
    resumed_crc = stored_crc(bytes);
    trainer.emplace(Trainer::resume(ckpt));
  } else {
    TrainConfig cfg;
    if (!a.config.empty())
      cfg.apply(read_text_file(a.config));
    if (a.seed)
      cfg.seed = *a.seed;
    if (a.atoms_per_batch)
      cfg.atoms_per_batch = *a.atoms_per_batch;
    if (a.self_cond)
      cfg.self_cond = *a.self_cond;
    if (a.steps)
      cfg.steps = *a.steps;
    if (a.checkpoint_every)
      cfg.checkpoint_every = *a.checkpoint_every;
    cfg.model.n_atom_types = vocab.n_atom_types();
    cfg.model.n_charges = vocab.n_charges();
    cfg.validate();
    trainer.emplace(init_params(cfg.model, cfg.seed), vocab, cfg);
  }
  const TrainConfig &cfg = trainer->config();
  const std::size_t target = a.steps.value_or(cfg.steps);
  const std::size_t every = a.checkpoint_every.value_or(cfg.checkpoint_every);
  const std::size_t first = trainer->steps_done() + 1;
  BatchStream stream(corpus, cfg.atoms_per_batch, cfg.seed);

  fs::create_directories(a.out);
  const std::string dir = fs::path(a.out).string() + "/";
  const bool fresh = a.resume.empty();
  std::ofstream loss(dir + "loss.csv",
                     fresh ? std::ios::trunc : std::ios::app);
  if (!loss)
    throw std::runtime_error("cannot open '" + dir + "loss.csv'");
  if (fresh)
    loss << "step,lr,loss,coord,atom,bond,charge,grad_norm,self_conditioned\n";
  loss << std::setprecision(10);

  Manifest manifest("train", argc, argv);
  manifest.add("data", a.data);
  manifest.add("data_crc", hex64(crc64(read_text_file(a.data))));
  manifest.add("molecules", corpus.size());
  manifest.add("seed", std::to_string(cfg.seed));
  if (!fresh) {
    manifest.add("resumed_from", a.resume);
    manifest.add("resumed_crc", hex64(resumed_crc));
  }
  manifest.add("first_step", first);
  manifest.add("last_step", std::max(target, first - 1));
  manifest.add("parameters", trainer->params().parameter_count());
  manifest.set_config(cfg.serialize());

  auto save = [&](const std::string &name) {
    const std::string bytes = encode_checkpoint(trainer->checkpoint());
    write_text_file(dir + name, bytes);
    manifest.add("checkpoint", name + " " + hex64(stored_crc(bytes)));
  };

  const auto start = Clock::now();
  int status = kOk;
  try {
    for (std::size_t s = first; s <= target; ++s) {
      const StepStats st = trainer->step(stream.at(s));
      loss << st.step << ',' << st.lr << ',' << st.loss << ',' << st.coord
           << ',' << st.atom << ',' << st.bond << ',' << st.charge << ','
           << st.grad_norm << ',' << (st.self_conditioned ? 1 : 0) << '\n';
      if (every > 0 && s % every == 0)
        save("checkpoint_" + std::to_string(s) + ".semla");
      if (s % 100 == 0 || s == target)
        std::cout << "step " << s << " loss " << fmt(st.loss) << std::endl;
    }
    save("final.semla");
  } catch (const NumericError &e) {
    std::cerr << "error: " << e.what() << '\n';
    manifest.add("failure", e.what());
    status = kNumeric;
  }
  loss.flush();
  manifest.add("wall_seconds", seconds_since(start));
  manifest.append_to(dir + "manifest.txt");
  return status;
}

// ---------------------------------------------------------------- sample

struct SampleArgs {
  std::string checkpoint, out = "samples.sdf", reference;
  std::size_t n_mols = 100, steps = kDefaultSampleSteps;
  double schedule_base = kDefaultScheduleBase;
  std::uint64_t seed = 0;
  std::optional<std::size_t> n_atoms;
  bool self_cond = true;
};

int cmd_sample(const SampleArgs &a, int argc, char **argv) {
  if (!a.n_atoms && a.reference.empty())
    throw UsageError("sample: give --n-atoms or --reference");
  if (a.steps == 0)
    throw UsageError("sample: --steps must be positive");
  const std::string bytes = read_text_file(a.checkpoint);
  const Checkpoint ckpt = decode_checkpoint(bytes);

  std::vector<std::size_t> sizes;
  if (a.n_atoms) {
    if (*a.n_atoms == 0)
      throw UsageError("sample: --n-atoms must be positive");
    sizes.assign(a.n_mols, *a.n_atoms);
  } else {
    const auto ref = read_corpus(a.reference, ckpt.vocab);
    if (ref.empty())
      throw std::invalid_argument(a.reference + ": no molecules");
    std::mt19937_64 rng = derive_rng(a.seed, 0x53495A45);
    for (std::size_t i = 0; i < a.n_mols; ++i)
      sizes.push_back(sample_size_distribution(ref, rng));
  }

  SampleOptions opts;
  opts.steps = a.steps;
  opts.schedule_base = a.schedule_base;
  opts.self_cond = a.self_cond;
  const std::size_t threads = thread_budget();
  const auto start = Clock::now();
  std::vector<Molecule> mols =
      generate_many(ckpt.params, sizes, a.seed, opts, threads);
  const double wall = seconds_since(start);
  for (std::size_t i = 0; i < mols.size(); ++i)
    mols[i].name = "sample_" + std::to_string(i);
  const std::string sdf = write_sdf_subset(mols, ckpt.vocab);
  write_text_file(a.out, sdf);

  Manifest manifest("sample", argc, argv);
  manifest.add("checkpoint", a.checkpoint);
  manifest.add("checkpoint_crc", hex64(stored_crc(bytes)));
  manifest.add("seed", std::to_string(a.seed));
  manifest.add("n_mols", a.n_mols);
  if (a.n_atoms)
    manifest.add("n_atoms", *a.n_atoms);
  else
    manifest.add("reference_crc", hex64(crc64(read_text_file(a.reference))));
  manifest.add("steps", a.steps);
  manifest.add("schedule_base", a.schedule_base);
  manifest.add("self_cond", std::string(a.self_cond ? "true" : "false"));
  manifest.add("nfe", a.steps);
  manifest.add("threads", threads);
  manifest.add("wall_seconds", wall);
  manifest.add("seconds_per_molecule",
               mols.empty() ? 0.0 : wall / static_cast<double>(mols.size()));
  manifest.add("output", a.out);
  manifest.add("output_crc", hex64(crc64(sdf)));
  manifest.append_to(a.out + ".manifest");
  std::cout << "wrote " << mols.size() << " molecules to " << a.out << " in "
            << fmt(wall) << " s (" << a.steps << " NFE each)\n";
  return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string sdf, reference, out;
};

int cmd_eval(const EvalArgs &a, int argc, char **argv) {
  const Vocabulary vocab = Vocabulary::default_toy();
  const ValenceTable table = ValenceTable::strict();
  const std::string text = read_text_file(a.sdf);
  std::vector<Molecule> mols;
  std::size_t errors = 0;
  const auto records = read_sdf_records(text, vocab);
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].molecule) {
      mols.push_back(*records[i].molecule);
    } else {
      ++errors;
      std::cerr << a.sdf << ": record " << i + 1 << " (line "
                << records[i].first_line << "): " << records[i].error << '\n';
    }
  }

  std::optional<std::unordered_set<std::string>> reference;
  if (!a.reference.empty()) {
    reference.emplace();
    for (const Molecule &m: read_corpus(a.reference, vocab))
      reference->insert(canonical_key(m, vocab));
  }
  const std::size_t threads = thread_budget();
  MetricsReport report = evaluate(mols, vocab, table,
                                  reference ? &*reference : nullptr, threads);
  report.n_parse_errors = errors;

  // Sampling time and NFE come from the sampler's manifest when present.
  std::optional<double> sample_seconds;
  std::optional<std::size_t> nfe;
  const std::string sample_manifest = a.sdf + ".manifest";
  if (auto v = manifest_value(sample_manifest, "wall_seconds"))
    sample_seconds = std::stod(*v);
  if (auto v = manifest_value(sample_manifest, "nfe"))
    nfe = std::stoul(*v);
  const std::string summary = report.summary(sample_seconds, nfe);
  std::cout << summary;

  if (!a.out.empty()) {
    const std::string csv = report.csv();
    write_text_file(a.out, csv);
    write_text_file(a.out + ".summary.txt", summary);
    Manifest manifest("eval", argc, argv);
    manifest.add("input", a.sdf);
    manifest.add("input_crc", hex64(crc64(text)));
    if (!a.reference.empty())
      manifest.add("reference_crc", hex64(crc64(read_text_file(a.reference))));
    manifest.add("valence_table", table.version());
    manifest.add("parse_errors", errors);
    manifest.add("output_crc", hex64(crc64(csv)));
    manifest.append_to(a.out + ".manifest");
  }
  if (errors > 0) {
    std::cerr << errors << " record(s) failed to parse\n";
    return kData;
  }
  return kOk;
}

// ---------------------------------------------------------------- align

int cmd_align(const std::string &path_a, const std::string &path_b) {
  const Vocabulary vocab = Vocabulary::default_toy();
  const auto a = read_corpus(path_a, vocab);
  const auto b = read_corpus(path_b, vocab);
  int status = kOk;
  if (a.size() != b.size()) {
    std::cerr << "error: " << a.size() << " records in " << path_a << " but "
              << b.size() << " in " << path_b << '\n';
    status = kData;
  }
  std::cout << std::setprecision(12);
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
    if (a[i].size() != b[i].size()) {
      std::cerr << "error: record " << i + 1 << ": " << a[i].size() << " vs "
                << b[i].size() << " atoms\n";
      status = kData;
      continue;
    }
    const auto x0 = zero_center(a[i].coords), x1 = zero_center(b[i].coords);
    const Alignment al = equivariant_ot_align(x0, x1);
    std::cout << "record " << i + 1 << " pre_mse " << al.identity_cost
              << " post_mse " << al.cost << " perm";
    for (std::size_t p: al.perm)
      std::cout << ' ' << p;
    std::cout << '\n';
  }
  return status;
}

// ---------------------------------------------------------------- bench

struct BenchArgs {
  std::string config, out;
  std::vector<std::size_t> dl_grid { 32, 64, 128, 256 };
  std::size_t n_atoms = 64, repeats = 20, warmup = 3;
  std::uint64_t seed = 0;
};

// Default benchmark model: wide enough for every d_l in the default grid.
SemlaConfig bench_model() {
  SemlaConfig c = SemlaConfig::toy(Vocabulary::default_toy());
  c.d_inv = 256;
  c.d_equi = 32;
  c.n_heads = 8;
  c.d_edge = 16;
  return c;
}

int cmd_bench(const BenchArgs &a, int argc, char **argv) {
  SemlaConfig base = bench_model();
  if (!a.config.empty()) {
    TrainConfig cfg;
    cfg.model = base;
    cfg.apply(read_text_file(a.config));
    base = cfg.model;
  }
  std::ostringstream csv;
  csv << "d_l,d_inv,n_atoms,parameters,pairwise_ms,forward_ms\n";
  std::cout << std::setw(6) << "d_l" << std::setw(12) << "parameters"
            << std::setw(14) << "pairwise_ms" << std::setw(14) << "forward_ms"
            << '\n';
  for (std::size_t dl: a.dl_grid) {
    SemlaConfig c = base;
    c.d_l = dl;
    const LatentTiming t =
        time_latent_attention(c, a.n_atoms, a.repeats, a.warmup, a.seed);
    csv << t.d_l << ',' << t.d_inv << ',' << t.n_atoms << ',' << t.parameters
        << ',' << fmt(1e3 * t.pairwise_seconds) << ','
        << fmt(1e3 * t.forward_seconds) << '\n';
    std::cout << std::setw(6) << t.d_l << std::setw(12) << t.parameters
              << std::setw(14) << std::fixed << std::setprecision(3)
              << 1e3 * t.pairwise_seconds << std::setw(14)
              << 1e3 * t.forward_seconds << std::defaultfloat << std::endl;
  }
  if (!a.out.empty()) {
    write_text_file(a.out, csv.str());
    Manifest manifest("bench-latent", argc, argv);
    manifest.add("seed", std::to_string(a.seed));
    manifest.add("n_atoms", a.n_atoms);
    manifest.add("repeats", a.repeats);
    manifest.add("warmup", a.warmup);
    manifest.set_config(base.serialize());
    manifest.append_to(a.out + ".manifest");
  }
  return kOk;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string out = "synthetic.sdf";
  std::size_t n_mols = 50;
  std::uint64_t seed = 1;
};

int cmd_synth(const SynthArgs &a, int argc, char **argv) {
  const Vocabulary vocab = Vocabulary::default_toy();
  const auto mols = synthetic_corpus(a.n_mols, a.seed, vocab);
  const std::string sdf = write_sdf_subset(mols, vocab);
  write_text_file(a.out, sdf);
  Manifest manifest("synth", argc, argv);
  manifest.add("seed", std::to_string(a.seed));
  manifest.add("n_mols", a.n_mols);
  manifest.add("output_crc", hex64(crc64(sdf)));
  manifest.append_to(a.out + ".manifest");
  std::cout << "wrote " << mols.size() << " molecules to " << a.out << '\n';
  return kOk;
}
}  // namespace

int main(int argc, char **argv) {
  CLI::App app { "semla: equivariant latent attention and flow matching for "
                 "molecule generation" };
  app.set_version_flag("--version", SEMLA_VERSION);
  app.require_subcommand(1);

  TrainArgs ta;
  auto *train = app.add_subcommand("train", "train a model on an SDF corpus");
  train->add_option("data", ta.data, "training molecules (SDF)")->required();
  auto *t_config = train->add_option("--config", ta.config, "key = value config file");
  train->add_option("--out", ta.out, "output directory")->capture_default_str();
  auto *t_seed = train->add_option("--seed", ta.seed, "random seed");
  train->add_option("--steps", ta.steps, "train until this step");
  auto *t_apb = train->add_option("--atoms-per-batch", ta.atoms_per_batch,
                                  "batch budget in atoms");
  auto *t_sc = train->add_option("--self-cond", ta.self_cond,
                                 "train with self-conditioning (true/false)");
  train->add_option("--checkpoint-every", ta.checkpoint_every,
                    "save a checkpoint every k steps (0: final only)");
  train->add_option("--resume", ta.resume, "continue from a checkpoint")
      ->excludes(t_config)
      ->excludes(t_seed)
      ->excludes(t_apb)
      ->excludes(t_sc);

  SampleArgs sa;
  auto *sample = app.add_subcommand("sample", "generate molecules from a checkpoint");
  sample->add_option("checkpoint", sa.checkpoint, "model checkpoint")->required();
  sample->add_option("--n-mols", sa.n_mols, "molecules to generate")->capture_default_str();
  sample->add_option("--steps", sa.steps, "integration steps (NFE)")->capture_default_str();
  sample->add_option("--schedule-base", sa.schedule_base, "log-schedule base")
      ->capture_default_str();
  sample->add_option("--seed", sa.seed, "random seed")->capture_default_str();
  auto *s_atoms = sample->add_option("--n-atoms", sa.n_atoms, "fixed molecule size");
  sample->add_option("--reference", sa.reference,
                     "draw sizes from this corpus's size distribution")
      ->excludes(s_atoms);
  sample->add_option("--self-cond", sa.self_cond, "use self-conditioning (true/false)")
      ->capture_default_str();
  sample->add_option("--out", sa.out, "output SDF")->capture_default_str();

  EvalArgs ea;
  auto *eval = app.add_subcommand("eval", "compute metrics for an SDF file");
  eval->add_option("sdf", ea.sdf, "molecules to evaluate")->required();
  eval->add_option("--reference", ea.reference, "training corpus for novelty");
  eval->add_option("--out", ea.out, "per-molecule CSV report");

  std::string align_a, align_b;
  auto *align = app.add_subcommand(
      "align", "optimal-transport alignment of paired records");
  align->add_option("a", align_a, "first SDF")->required();
  align->add_option("b", align_b, "second SDF")->required();

  BenchArgs ba;
  auto *bench = app.add_subcommand("bench-latent",
                                    "time latent attention over a d_l grid");
  bench->add_option("--dl-grid", ba.dl_grid, "comma-separated d_l values")
      ->delimiter(',')
      ->capture_default_str();
  bench->add_option("--config", ba.config, "model config overrides");
  bench->add_option("--n-atoms", ba.n_atoms, "atoms in the timed molecule")
      ->capture_default_str();
  bench->add_option("--repeats", ba.repeats, "timed runs")->capture_default_str();
  bench->add_option("--warmup", ba.warmup, "untimed runs")->capture_default_str();
  bench->add_option("--seed", ba.seed, "weight and input seed")->capture_default_str();
  bench->add_option("--out", ba.out, "CSV output");

  SynthArgs ya;
  auto *synth = app.add_subcommand("synth", "write a synthetic training corpus");
  synth->add_option("--n-mols", ya.n_mols, "corpus size")->capture_default_str();
  synth->add_option("--seed", ya.seed, "random seed")->capture_default_str();
  synth->add_option("--out", ya.out, "output SDF")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train)
      return cmd_train(ta, argc, argv);
    if (*sample)
      return cmd_sample(sa, argc, argv);
    if (*eval)
      return cmd_eval(ea, argc, argv);
    if (*align)
      return cmd_align(align_a, align_b);
    if (*bench)
      return cmd_bench(ba, argc, argv);
    if (*synth)
      return cmd_synth(ya, argc, argv);
  } catch (const UsageError &e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError &e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception &e) {
    // Checkpoint, SDF, config and file-system failures.
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
