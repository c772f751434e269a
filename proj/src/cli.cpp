#include "reflora/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "reflora/harness.hpp"
#include "reflora/props.hpp"

namespace reflora {
namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> items;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) {
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

/// Shortest decimal that reads back to the same double.
std::string shortest(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string shell_quote(const std::string& s) {
  if (!s.empty() && s.find_first_not_of("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"
                                        "0123456789-_.,/:+=") == std::string::npos) {
    return s;
  }
  std::string q = "'";
  for (char c : s) {
    if (c == '\'') q += "'\\''";
    else q += c;
  }
  return q + "'";
}

/// Options of one subcommand, remembered in definition order so the resolved values can be
/// echoed into output headers.
class OptionSet {
 public:
  OptionSet(std::string command, std::string description)
      : command_(std::move(command)), app_(std::make_unique<CLI::App>(description, command_)) {
    app_->set_config("--config", "", "Read flat `key = value` lines; flags override them");
    app_->set_version_flag("--version", kVersion);
  }

  CLI::App& app() { return *app_; }

  /// False when --help or --version was handled.
  bool parse(int argc, const char* const* argv, std::ostream& out) {
    try {
      app_->parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      out << app_->help();
      return false;
    } catch (const CLI::CallForAllHelp&) {
      out << app_->help("", CLI::AppFormatMode::All);
      return false;
    } catch (const CLI::CallForVersion&) {
      out << kVersion << '\n';
      return false;
    }
    return true;
  }

  void real(const std::string& key, double& v, const std::string& help) {
    app_->add_option("--" + key, v, help)->capture_default_str();
    entries_.push_back({key, [&v] { return shortest(v); }, false, true});
  }
  void count(const std::string& key, std::size_t& v, const std::string& help) {
    app_->add_option("--" + key, v, help)->capture_default_str();
    entries_.push_back({key, [&v] { return std::to_string(v); }, false, true});
  }
  void index(const std::string& key, Index& v, const std::string& help) {
    app_->add_option("--" + key, v, help)->capture_default_str();
    entries_.push_back({key, [&v] { return std::to_string(v); }, false, true});
  }
  void seed(std::uint64_t& v) {
    app_->add_option("--seed", v, "Root seed; every random stream derives from it")
        ->capture_default_str();
    entries_.push_back({"seed", [&v] { return std::to_string(v); }, false, true});
  }
  void text(const std::string& key, std::string& v, const std::string& help,
            bool in_config = true) {
    app_->add_option("--" + key, v, help)->capture_default_str();
    entries_.push_back({key, [&v] { return v; }, false, in_config});
  }
  void flag(const std::string& key, bool& v, const std::string& help) {
    app_->add_flag("--" + key, v, help);
    entries_.push_back({key, [&v] { return std::string(v ? "true" : "false"); }, true, true});
  }

  /// Comment header: version, the canonical command, every resolved config key and the seed.
  void write_header(std::ostream& os, std::uint64_t seed, const std::string& out_path) const {
    os << "# reflora " << kVersion << '\n';
    os << "# command: reflora " << command_;
    for (const Entry& e : entries_) {
      if (e.key == "out") continue;
      const std::string v = e.value();
      if (e.is_flag) {
        if (v == "true") os << " --" << e.key;
      } else if (!v.empty()) {
        os << " --" << e.key << ' ' << shell_quote(v);
      }
    }
    if (!out_path.empty()) os << " --out " << shell_quote(out_path);
    os << '\n';
    for (const Entry& e : entries_) {
      if (e.in_config) os << "# config: " << e.key << " = " << e.value() << '\n';
    }
    os << "# seed: " << seed << '\n';
  }

 private:
  struct Entry {
    std::string key;
    std::function<std::string()> value;
    bool is_flag;
    bool in_config;
  };
  std::string command_;
  std::unique_ptr<CLI::App> app_;
  std::vector<Entry> entries_;
};

/// Opens --out (or falls back to the given stream) and writes the header.
class Sink {
 public:
  Sink(const std::string& path, std::ostream& fallback) : path_(path) {
    if (path.empty()) {
      os_ = &fallback;
      return;
    }
    file_.open(path);
    if (!file_) throw UsageError("--out: cannot open '" + path + "' for writing");
    os_ = &file_;
  }
  std::ostream& stream() { return *os_; }

 private:
  std::string path_;
  std::ofstream file_;
  std::ostream* os_ = nullptr;
};

RootChoice parse_root(const std::string& s) {
  if (s == "plus") return RootChoice::Plus;
  if (s == "minus") return RootChoice::Minus;
  throw UsageError("--root: expected 'plus' or 'minus', got '" + s + "'");
}

Method parse_method_flag(const std::string& s, const char* flag) {
  try {
    return parse_method(s);
  } catch (const Error&) {
    throw UsageError(std::string(flag) + ": unknown method '" + s +
                     "' (expected lora, reflora, reflora-s, scaledgd)");
  }
}

// ---------------------------------------------------------------------------
// mf, linreg, compare

struct RunOptions {
  ProblemKind kind = ProblemKind::Mf;
  std::string method = "reflora";
  std::string methods = "lora,reflora,scaledgd";
  std::string optimizer = "gd";
  double eta = 0.01;
  std::size_t steps = 2000;
  std::size_t log_every = 1;
  std::string mode = "balanced";
  double lipschitz = 0.0;
  std::string root = "plus";
  std::size_t warmup = 1;
  std::uint64_t seed = 42;
  Index m = 128, n = 100, r = 8, k = 2;
  double alpha = 0.0;
  double sigma_a = 1.0;
  double sigma_b = 0.0;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, weight_decay = 0.0;
  bool timing = false;
  std::string dump_instance;
  std::string out;

  explicit RunOptions(ProblemKind kind_) : kind(kind_) {
    if (kind == ProblemKind::LinReg) {
      m = n = k = 2;
      r = 1;
      sigma_a = std::sqrt(10.0);
      sigma_b = std::sqrt(0.1);
    }
  }
};

void register_run_options(OptionSet& set, RunOptions& o, bool many_methods) {
  if (many_methods) {
    set.text("methods", o.methods, "Comma-separated methods: lora, reflora, reflora-s, scaledgd");
  } else {
    set.text("method", o.method, "lora | reflora | reflora-s | scaledgd");
  }
  set.text("optimizer", o.optimizer, "gd | adam | adamw");
  set.real("eta", o.eta, "Learning rate");
  set.count("steps", o.steps, "Iterations");
  set.count("log-every", o.log_every, "Log every N steps");
  set.text("mode", o.mode, "Refactoring mode: balanced | theorem-exact | identity");
  set.real("lipschitz", o.lipschitz, "L for theorem-exact (0: the problem's exact constant)");
  set.text("root", o.root, "Small-eta root for theorem-exact: plus | minus");
  set.count("warmup", o.warmup, "Steps allowed to fall back to LoRA while factors are rank deficient");
  set.seed(o.seed);
  set.index("m", o.m, "Rows of W");
  set.index("n", o.n, "Columns of W");
  set.index("r", o.r, "Adapter rank");
  if (o.kind == ProblemKind::LinReg) set.index("k", o.k, "Samples");
  set.real("alpha", o.alpha, "Adapter scaling alpha (0: alpha = r)");
  set.real("sigma-a", o.sigma_a, "Std. dev. of A_0");
  set.real("sigma-b", o.sigma_b, "Std. dev. of B_0 (0: B_0 = 0)");
  set.real("beta1", o.beta1, "Adam beta1");
  set.real("beta2", o.beta2, "Adam beta2");
  set.real("adam-eps", o.adam_eps, "Adam epsilon");
  set.real("weight-decay", o.weight_decay, "Weight decay (decoupled for adamw)");
  set.flag("timing", o.timing, "Record per-step wall time (otherwise step_time_ns = 0)");
  set.text("dump-instance", o.dump_instance, "Also write the problem instance to this path",
           false);
  set.text("out", o.out, "Output CSV path (default: stdout)", false);
}

RefactorMode make_mode(Method method, const std::string& mode, double lipschitz, RootChoice root) {
  const bool scalar = method == Method::RefLoRaS;
  if (mode == "balanced") return scalar ? RefactorMode::scalar() : RefactorMode::balanced();
  if (mode == "theorem-exact") {
    return scalar ? RefactorMode::scalar_theorem_exact(lipschitz, root)
                  : RefactorMode::theorem_exact(lipschitz, root);
  }
  if (mode == "identity") {
    if (scalar) throw UsageError("--mode: identity applies to reflora only");
    return RefactorMode::identity();
  }
  throw UsageError("--mode: expected balanced, theorem-exact or identity, got '" + mode + "'");
}

RunSpec make_run_spec(RunOptions& o, Method method) {
  if (o.mode == "theorem-exact" && o.eta == 0.0) {
    throw UsageError(
        "--eta: eta = 0 is a jump discontinuity of the theorem-exact refactoring; pass a "
        "nonzero learning rate");
  }
  if (!(o.eta > 0.0) || !std::isfinite(o.eta)) throw UsageError("--eta: must be finite and positive");
  if (o.steps < 1) throw UsageError("--steps: must be at least 1");
  if (o.log_every < 1) throw UsageError("--log-every: must be at least 1");
  if (o.m < 1 || o.n < 1 || o.r < 1 || o.r > std::min(o.m, o.n)) {
    throw UsageError("--r: need 1 <= r <= min(m, n)");
  }
  if (o.kind == ProblemKind::LinReg && o.k < 1) throw UsageError("--k: must be positive");
  if (o.alpha < 0.0) throw UsageError("--alpha: must be positive (0 selects alpha = r)");
  if (o.sigma_a < 0.0) throw UsageError("--sigma-a: must be nonnegative");
  if (o.sigma_b < 0.0) throw UsageError("--sigma-b: must be nonnegative");
  if (o.lipschitz < 0.0) throw UsageError("--lipschitz: must be positive");

  RunSpec spec;
  spec.problem.kind = o.kind;
  spec.problem.m = o.m;
  spec.problem.n = o.n;
  spec.problem.r = o.r;
  spec.problem.k = o.k;
  spec.problem.seed = o.seed;
  if (o.alpha == 0.0) o.alpha = static_cast<double>(o.r);
  spec.problem.alpha = o.alpha;
  spec.init = {o.sigma_a, o.sigma_b};
  spec.iterations = o.steps;
  spec.log_every = o.log_every;
  spec.record_timing = o.timing;
  spec.adam = {o.beta1, o.beta2, o.adam_eps, o.weight_decay};

  spec.step.eta = o.eta;
  spec.step.method = method;
  spec.step.warmup_steps = o.warmup;
  try {
    spec.step.optimizer = parse_optimizer(o.optimizer);
  } catch (const Error&) {
    throw UsageError("--optimizer: expected gd, adam or adamw, got '" + o.optimizer + "'");
  }
  const RootChoice root = parse_root(o.root);
  if (o.mode == "theorem-exact" && o.lipschitz == 0.0) {
    o.lipschitz = *build_problem(spec.problem, spec.init).problem->lipschitz();
  }
  spec.step.refactor_mode = make_mode(method, o.mode, o.lipschitz, root);
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  return spec;
}

void dump_instance(const RunOptions& o, const RunSpec& spec, const OptionSet& set) {
  if (o.dump_instance.empty()) return;
  std::ofstream f(o.dump_instance);
  if (!f) throw UsageError("--dump-instance: cannot open '" + o.dump_instance + "' for writing");
  set.write_header(f, o.seed, o.out);
  const BuiltProblem built = build_problem(spec.problem, spec.init);
  if (o.kind == ProblemKind::Mf) {
    write_instance(f, static_cast<const MatrixFactorizationProblem&>(*built.problem).instance());
  } else {
    write_instance(f, static_cast<const LinearRegressionProblem&>(*built.problem).instance());
  }
}

int cmd_run(ProblemKind kind, int argc, const char* const* argv, std::ostream& out) {
  RunOptions o(kind);
  OptionSet set(kind == ProblemKind::Mf ? "mf" : "linreg",
                kind == ProblemKind::Mf ? "Matrix-factorization run" : "Linear-regression run");
  register_run_options(set, o, false);
  if (!set.parse(argc, argv, out)) return 0;

  const RunSpec spec = make_run_spec(o, parse_method_flag(o.method, "--method"));
  Sink sink(o.out, out);
  const Trace trace = run(spec);
  set.write_header(sink.stream(), o.seed, o.out);
  write_trace_csv(sink.stream(), trace);
  dump_instance(o, spec, set);
  return 0;
}

int finish_compare(OptionSet& set, RunOptions& o, std::ostream& out) {
  std::vector<RunSpec> specs;
  for (const std::string& name : split_list(o.methods)) {
    specs.push_back(make_run_spec(o, parse_method_flag(name, "--methods")));
  }
  if (specs.empty()) throw UsageError("--methods: at least one method is required");
  Sink sink(o.out, out);
  const Comparison cmp = compare(specs);
  set.write_header(sink.stream(), o.seed, o.out);
  write_comparison_csv(sink.stream(), cmp);
  return 0;
}

int cmd_compare(int argc, const char* const* argv, std::ostream& out) {
  std::string problem = "mf";
  RunOptions o(ProblemKind::Mf);
  OptionSet set("compare", "Side-by-side runs on one problem instance");
  set.text("problem", problem, "mf | linreg");
  register_run_options(set, o, true);
  if (!set.parse(argc, argv, out)) return 0;
  if (problem == "mf") return finish_compare(set, o, out);
  if (problem != "linreg") throw UsageError("--problem: expected mf or linreg, got '" + problem + "'");

  // Parse again so unset dimensions take the linreg defaults.
  RunOptions lo(ProblemKind::LinReg);
  OptionSet lset("compare", "Side-by-side runs on one problem instance");
  lset.text("problem", problem, "mf | linreg");
  register_run_options(lset, lo, true);
  if (!lset.parse(argc, argv, out)) return 0;
  return finish_compare(lset, lo, out);
}

// ---------------------------------------------------------------------------
// bound-scan

int cmd_bound_scan(int argc, const char* const* argv, std::ostream& out) {
  BoundScanSpec spec;
  std::string modes = "identity,theorem-exact";
  std::string root = "plus";
  std::string out_path;
  OptionSet set("bound-scan", "Loss and truncated upper bound of one refactored step over an eta grid");
  set.index("m", spec.m, "Rows of W");
  set.index("n", spec.n, "Columns of W");
  set.index("k", spec.k, "Samples");
  set.index("r", spec.r, "Adapter rank");
  set.seed(spec.seed);
  set.real("sigma-a", spec.sigma_a, "Std. dev. of A_0");
  set.real("sigma-b", spec.sigma_b, "Std. dev. of B_0");
  set.real("eta-min", spec.eta_min, "Grid start");
  set.real("eta-max", spec.eta_max, "Grid end");
  set.count("points", spec.points, "Grid points before removing eta = 0");
  set.text("modes", modes, "Comma-separated: identity, theorem-exact");
  set.text("root", root, "Small-eta root for theorem-exact: plus | minus");
  set.text("out", out_path, "Output CSV path (default: stdout)", false);
  if (!set.parse(argc, argv, out)) return 0;

  if (spec.points < 2) throw UsageError("--points: need at least 2");
  if (!(spec.eta_max > spec.eta_min)) throw UsageError("--eta-max: must exceed --eta-min");
  if (spec.r < 1 || spec.r > std::min(spec.m, spec.n)) throw UsageError("--r: need 1 <= r <= min(m, n)");
  if (spec.k < 1) throw UsageError("--k: must be positive");
  if (!(spec.sigma_a > 0.0)) throw UsageError("--sigma-a: must be positive");
  if (!(spec.sigma_b > 0.0)) throw UsageError("--sigma-b: must be positive");
  spec.root = parse_root(root);
  spec.modes.clear();
  for (const std::string& m : split_list(modes)) {
    if (m == "identity") spec.modes.push_back(BoundMode::Identity);
    else if (m == "theorem-exact") spec.modes.push_back(BoundMode::TheoremExact);
    else throw UsageError("--modes: unknown mode '" + m + "'");
  }
  if (spec.modes.empty()) throw UsageError("--modes: at least one mode is required");

  Sink sink(out_path, out);
  const BoundScanResult result = bound_scan(spec);
  set.write_header(sink.stream(), spec.seed, out_path);
  write_bound_scan_csv(sink.stream(), result);
  return 0;
}

// ---------------------------------------------------------------------------
// overhead

int cmd_overhead(int argc, const char* const* argv, std::ostream& out) {
  std::string dims = "2048x2048";
  std::string ranks = "8,32";
  std::size_t repeats = 20;
  std::uint64_t seed = 42;
  std::string out_path;
  OptionSet set("overhead", "Median per-step wall time by method");
  set.text("dims", dims, "Comma-separated MxN shapes");
  set.text("ranks", ranks, "Comma-separated ranks");
  set.count("repeats", repeats, "Timed repeats per configuration (>= 10)");
  set.seed(seed);
  set.text("out", out_path, "Output CSV path (default: stdout)", false);
  if (!set.parse(argc, argv, out)) return 0;

  if (repeats < 10) throw UsageError("--repeats: need at least 10");
  std::vector<std::pair<Index, Index>> shape_list;
  for (const std::string& d : split_list(dims)) {
    const auto x = d.find('x');
    try {
      if (x == std::string::npos) throw std::invalid_argument(d);
      shape_list.emplace_back(std::stol(d.substr(0, x)), std::stol(d.substr(x + 1)));
    } catch (const std::exception&) {
      throw UsageError("--dims: expected MxN, got '" + d + "'");
    }
  }
  std::vector<Index> rank_list;
  for (const std::string& r : split_list(ranks)) {
    try {
      rank_list.push_back(std::stol(r));
    } catch (const std::exception&) {
      throw UsageError("--ranks: expected integers, got '" + r + "'");
    }
  }
  if (shape_list.empty() || rank_list.empty()) throw UsageError("--dims/--ranks: must be nonempty");
  for (const auto& [m, n] : shape_list) {
    for (Index r : rank_list) {
      if (m < 1 || n < 1 || r < 1 || r > std::min(m, n)) {
        throw UsageError("--ranks: need 1 <= r <= min(m, n) for every shape");
      }
    }
  }

  Sink sink(out_path, out);
  const auto rows = overhead_probe(shape_list, rank_list, repeats, seed);
  set.write_header(sink.stream(), seed, out_path);
  write_overhead_csv(sink.stream(), rows);
  return 0;
}

// ---------------------------------------------------------------------------
// props-report

int cmd_props(int argc, const char* const* argv, std::ostream& out) {
  PropsOptions opts;
  std::string out_path;
  OptionSet set("props-report", "Invariant suites on fresh random instances");
  set.count("trials", opts.trials, "Random instances per property");
  set.seed(opts.seed);
  set.text("out", out_path, "Output path (default: stdout)", false);
  set.app().add_flag("--inject-fault", opts.inject_fault)->group("");
  if (!set.parse(argc, argv, out)) return 0;
  if (opts.trials < 1) throw UsageError("--trials: need at least 1");

  Sink sink(out_path, out);
  const auto outcomes = run_properties(opts);
  set.write_header(sink.stream(), opts.seed, out_path);
  write_props_table(sink.stream(), outcomes);
  return all_pass(outcomes) ? 0 : 1;
}

void print_usage(std::ostream& os) {
  os << "reflora " << kVersion << "\n"
     << "usage: reflora <command> [options]    (reflora <command> --help for details)\n\n"
     << "commands:\n"
     << "  mf            matrix-factorization run, CSV trace\n"
     << "  linreg        linear-regression run, CSV trace\n"
     << "  bound-scan    one-step loss and upper bound over an eta grid\n"
     << "  compare       several methods on one instance, joined on step\n"
     << "  overhead      per-step wall time by method\n"
     << "  props-report  invariant checks with measured residuals\n";
}

}  // namespace

int parse_and_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  if (argc < 2) {
    print_usage(err);
    return 2;
  }
  const std::string cmd = argv[1];
  if (cmd == "-h" || cmd == "--help" || cmd == "help") {
    print_usage(out);
    return 0;
  }
  if (cmd == "--version") {
    out << kVersion << '\n';
    return 0;
  }
  const int sub_argc = argc - 1;
  const char* const* sub_argv = argv + 1;
  try {
    if (cmd == "mf") return cmd_run(ProblemKind::Mf, sub_argc, sub_argv, out);
    if (cmd == "linreg") return cmd_run(ProblemKind::LinReg, sub_argc, sub_argv, out);
    if (cmd == "compare") return cmd_compare(sub_argc, sub_argv, out);
    if (cmd == "bound-scan") return cmd_bound_scan(sub_argc, sub_argv, out);
    if (cmd == "overhead") return cmd_overhead(sub_argc, sub_argv, out);
    if (cmd == "props-report") return cmd_props(sub_argc, sub_argv, out);
    err << "error: unknown command '" << cmd << "'\n";
    print_usage(err);
    return 2;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace reflora
