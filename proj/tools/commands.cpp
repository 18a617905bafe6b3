#include "commands.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <omp.h>

#include "relsearch/encoding.hpp"
#include "relsearch/net_builder.hpp"
#include "relsearch/predictor.hpp"
#include "relsearch/run_config.hpp"
#include "relsearch/search.hpp"
#include "relsearch/search_space.hpp"

namespace relsearch::cli {

namespace fs = std::filesystem;

namespace {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Exclusive ownership of a run directory for the lifetime of the object.
class RunLock {
public:
    explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
        fs::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) {
            throw IoError(errno == EEXIST ? "run directory " + dir.string() + " is locked by another process"
                                          : "cannot create lock file " + path_.string());
        }
        const std::string pid = std::to_string(::getpid()) + "\n";
        // The lock is the file's existence; the pid is informational.
        [[maybe_unused]] const auto written = ::write(fd_, pid.data(), pid.size());
    }
    ~RunLock() {
        ::close(fd_);
        std::error_code ec;
        fs::remove(path_, ec);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path path_;
    int fd_ = -1;
};

std::vector<std::string> read_lines(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") != std::string::npos) out.push_back(line);
    }
    return out;
}

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("short write to " + path.string());
}

std::vector<CandidateRecord> load_candidates(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("no such file " + path.string());
    return read_candidates_jsonl(path);
}

// Output goes to `out` when given, stdout otherwise.
void emit(const std::string& out, const std::string& text) {
    if (out.empty()) {
        std::cout << text;
    } else {
        write_file(out, text);
    }
}

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

void print_top(const RankingReport& r, const std::vector<CandidateRecord>& cs, std::size_t n) {
    std::map<int, const CandidateRecord*> by_id;
    for (const auto& c : cs) by_id[c.id] = &c;
    std::map<int, int> wins;
    for (std::size_t k = 0; k < r.ids.size(); ++k) wins[r.ids[k]] = r.wins[k];
    std::printf("%-5s %-6s %-6s %-6s %-8s %s\n", "rank", "id", "wins", "role", "score", "blocks");
    for (std::size_t k = 0; k < std::min(n, r.order.size()); ++k) {
        const CandidateRecord& c = *by_id.at(r.order[k]);
        std::printf("%-5zu %-6d %-6d %-6s %-8s %d\n", k + 1, c.id, wins.at(c.id), candidate_role_name(c.role),
                    c.score ? fixed(c.score->dice, 4).c_str() : "-", c.config.arch().block_count());
    }
}

int workers() { return threads_from_env(); }

// ---- subcommands -------------------------------------------------------------------

int cmd_sample(std::uint64_t seed, int count, const std::string& out) {
    if (count < 0) throw std::invalid_argument("--count must be >= 0");
    write_candidates_jsonl(out, sample_candidates(count, seed));
    std::cerr << "wrote " << count << " candidates to " << out << "\n";
    return kExitOk;
}

int cmd_validate(const std::string& in) {
    const auto lines = read_lines(in);
    if (lines.empty()) {
        std::cerr << "warning: " << in << " contains no candidates\n";
        return kExitOk;
    }
    int bad = 0;
    for (std::size_t n = 0; n < lines.size(); ++n) {
        std::string who = "line " + std::to_string(n + 1);
        try {
            const nlohmann::json j = nlohmann::json::parse(lines[n]);
            if (j.contains("id")) who += " (candidate " + std::to_string(j.at("id").get<int>()) + ")";
            const nlohmann::json& cfg = j.contains("config") ? j.at("config") : j;
            const Configuration c = configuration_from_json(cfg);
            if (j.contains("encoded") && encode(c) != encoded_from_json(j.at("encoded"))) {
                throw std::invalid_argument("encoded vector does not match config");
            }
        } catch (const ValidationError& e) {
            ++bad;
            std::cout << who << ": " << e.report().summary() << "\n";
        } catch (const std::exception& e) {
            ++bad;
            std::cout << who << ": " << e.what() << "\n";
        }
    }
    if (bad) {
        std::cout << bad << " of " << lines.size() << " candidates invalid\n";
        return kExitValidation;
    }
    std::cout << lines.size() << " candidates valid\n";
    return kExitOk;
}

int cmd_encode(const std::string& in, const std::string& out) {
    std::string text;
    for (const auto& line : read_lines(in)) {
        const nlohmann::json j = nlohmann::json::parse(line);
        text += to_text(encode(configuration_from_json(j.contains("config") ? j.at("config") : j))) + "\n";
    }
    emit(out, text);
    return kExitOk;
}

int cmd_decode(const std::string& in, const std::string& vector, const std::string& out) {
    std::vector<std::string> lines;
    if (!vector.empty()) lines.push_back(vector);
    if (!in.empty()) {
        for (auto& l : read_lines(in)) lines.push_back(std::move(l));
    }
    if (lines.empty()) throw std::invalid_argument("decode needs --in or --vector");
    std::string text;
    for (const auto& line : lines) text += to_json(decode(encoded_from_text(line))).dump() + "\n";
    emit(out, text);
    return kExitOk;
}

int cmd_evaluate(const RunConfig& rc, const std::string& in, const std::string& out) {
    auto cs = load_candidates(in);
    const auto ev = make_evaluator(rc);
    evaluate_candidates(cs, *ev, workers());
    int failed = 0;
    for (const auto& c : cs) failed += c.status == CandidateStatus::Failed;
    write_candidates_jsonl(out, cs);
    std::cerr << "evaluated " << cs.size() - static_cast<std::size_t>(failed) << ", failed " << failed << " ("
              << ev->name() << ") -> " << out << "\n";
    return kExitOk;
}

PredictorKind parse_kind(const std::string& s) {
    if (s == "transformer") return PredictorKind::TransformerRelation;
    if (s == "mlp") return PredictorKind::MlpRelation;
    if (s == "regressor") return PredictorKind::AccuracyRegressor;
    throw std::invalid_argument("--kind must be transformer, mlp or regressor");
}

int cmd_train_predictor(const RunConfig& rc, const std::string& in, const std::string& out_dir,
                        const std::string& kind_name) {
    const PredictorKind kind = parse_kind(kind_name);
    auto cs = load_candidates(in);
    std::vector<CandidateRecord> used;
    for (auto& c : cs) {
        if (c.status != CandidateStatus::Sampled) used.push_back(std::move(c));
    }
    if (used.empty()) throw std::invalid_argument("no evaluated candidates in " + in);
    const bool tagged = std::any_of(used.begin(), used.end(), [](const auto& c) { return c.role == CandidateRole::Train; });
    if (!tagged) {
        // Untagged input: the leading three quarters train, the rest validate.
        const auto n_train = std::max<std::size_t>(1, used.size() * 3 / 4);
        for (std::size_t k = 0; k < used.size(); ++k) {
            used[k].role = k < n_train ? CandidateRole::Train : CandidateRole::Val;
        }
    }
    const TrainedRecordSet records = to_records(used);

    RunLock lock(out_dir);
    TrainedPredictor tp = [&] {
        if (kind == PredictorKind::AccuracyRegressor) return train_accuracy_regressor(records, rc.hyper);
        const auto pairs = build_pair_dataset(records, Split::Train);
        return kind == PredictorKind::TransformerRelation ? train_relation_predictor(pairs, rc.hyper)
                                                          : train_mlp_baseline(pairs, rc.hyper);
    }();

    nlohmann::ordered_json extra;
    extra["train_records"] = std::count_if(records.begin(), records.end(),
                                           [](const auto& r) { return r.split == Split::Train; });
    extra["final_loss"] = tp.curve.points.empty() ? 0.0 : tp.curve.points.back().second;
    std::vector<int> ids;
    std::vector<EncodedConfig> enc;
    std::vector<double> scores;
    for (const auto& r : records) {
        if (r.split != Split::Val) continue;
        ids.push_back(r.id);
        enc.push_back(r.encoded);
        scores.push_back(r.score.dice);
    }
    if (ids.size() >= 2) {
        std::vector<double> predicted;
        if (kind == PredictorKind::AccuracyRegressor) {
            std::vector<double> est;
            for (const auto& v : enc) est.push_back(predict_accuracy(tp.model, v));
            predicted = ranks_descending(est);
        } else {
            predicted = ranks_from_order(rank_candidates(tp.model, enc, ids).order, ids);
        }
        const double rho = rank_correlation(ranks_descending(scores), predicted);
        extra["val_spearman"] = rho;
        std::cout << "val spearman " << fixed(rho, 4) << " over " << ids.size() << " records\n";
    }
    save_checkpoint(tp.model, fs::path(out_dir) / "predictor.bin", extra);
    std::ostringstream curve;
    curve.precision(17);
    curve << "iteration,loss\n";
    for (const auto& [it, loss] : tp.curve.points) curve << it << ',' << loss << '\n';
    write_file(fs::path(out_dir) / "training_curve.csv", curve.str());
    std::cerr << "saved " << predictor_kind_name(kind) << " to " << (fs::path(out_dir) / "predictor.bin").string()
              << "\n";
    return kExitOk;
}

int cmd_rank(const std::string& predictor, const std::string& in, const std::string& out) {
    if (!fs::exists(predictor)) throw IoError("no such checkpoint " + predictor);
    const Predictor p = load_checkpoint(predictor);
    if (p.kind == PredictorKind::AccuracyRegressor) {
        throw std::invalid_argument("rank needs a relation predictor, got " +
                                    std::string(predictor_kind_name(p.kind)));
    }
    const auto cs = load_candidates(in);
    std::vector<int> ids;
    std::vector<EncodedConfig> enc;
    for (const auto& c : cs) {
        ids.push_back(c.id);
        enc.push_back(c.encoded);
    }
    const RankingReport r = rank_candidates(p, enc, ids);
    if (!out.empty()) write_file(out, to_json(r).dump(2) + "\n");
    print_top(r, cs, 5);
    return kExitOk;
}

nlohmann::ordered_json config_echo(const RunConfig& rc, const nlohmann::ordered_json& overrides) {
    nlohmann::ordered_json j = to_json(rc);
    j["overrides"] = overrides.is_null() ? nlohmann::ordered_json::object() : overrides;
    return j;
}

int cmd_search(RunConfig rc, const nlohmann::ordered_json& overrides, bool confirm) {
    RunLock lock(rc.out_dir);
    const auto ev = make_evaluator(rc);
    SearchOptions o;
    o.budgets = rc.budgets;
    o.hyper = rc.hyper;
    o.seed = rc.seed;
    o.workers = workers();
    o.out_dir = rc.out_dir;
    o.config_echo = config_echo(rc, overrides);
    const SearchResult res = run_search(*ev, o);
    std::printf("ranked %zu candidates; val spearman %s\n", res.ranking.order.size(),
                fixed(res.val_correlation, 4).c_str());
    print_top(res.ranking, res.candidates, 5);
    const CandidateRecord& best = res.candidates[static_cast<std::size_t>(res.best_id)];
    std::printf("selected candidate %d (%s)\n", best.id, candidate_role_name(best.role));
    if (confirm) {
        const EvalScore s = ev->evaluate(best.config, best.seed);
        std::printf("confirmed score %s\n", fixed(s.dice, 4).c_str());
    }
    std::printf("artifacts in %s\n", rc.out_dir.string().c_str());
    return kExitOk;
}

int cmd_ablation(RunConfig rc, const nlohmann::ordered_json& overrides, int n_seeds, bool oracle) {
    if (n_seeds < 1) throw std::invalid_argument("--seeds must be >= 1");
    RunLock lock(rc.out_dir);
    const auto ev = make_evaluator(rc);
    AblationReport rep;
    if (oracle) {
        auto cs = sample_candidates(rc.budgets.n_initial, rc.seed);
        for (std::size_t k = 0; k < cs.size(); ++k) {
            cs[k].role = static_cast<int>(k) < rc.budgets.n_train ? CandidateRole::Train : CandidateRole::Val;
        }
        evaluate_candidates(cs, *ev, workers());
        rep = oracle_ablation(to_records(cs));
        rep.seeds = {rc.seed};
    } else {
        std::vector<std::uint64_t> seeds;
        for (int k = 0; k < n_seeds; ++k) seeds.push_back(rc.seed + static_cast<std::uint64_t>(k));
        rep = ablation_experiment(*ev, rc.budgets, rc.hyper, seeds, workers());
    }
    write_ablation(rep, rc.out_dir);
    nlohmann::ordered_json manifest;
    manifest["schema_version"] = kSchemaVersion;
    manifest["version"] = kVersion;
    manifest["command"] = "ablation";
    manifest["oracle"] = oracle;
    manifest["config"] = config_echo(rc, overrides);
    write_file(rc.out_dir / "manifest.json", manifest.dump(2) + "\n");
    std::printf("%-22s %-8s %s\n", "predictor", "median", "per-seed");
    for (const auto& p : rep.predictors) {
        std::string per;
        for (double c : p.correlations) per += fixed(c, 3) + " ";
        std::printf("%-22s %-8s %s\n", p.name.c_str(), fixed(p.median, 3).c_str(), per.c_str());
    }
    return kExitOk;
}

int cmd_export_graph(const std::string& candidate, int id, const std::string& dot, const std::string& json,
                     int c1, int classes) {
    const auto lines = read_lines(candidate);
    std::optional<Configuration> config;
    for (const auto& line : lines) {
        const nlohmann::json j = nlohmann::json::parse(line);
        if (id >= 0 && (!j.contains("id") || j.at("id").get<int>() != id)) continue;
        config = configuration_from_json(j.contains("config") ? j.at("config") : j);
        break;
    }
    if (!config) throw std::invalid_argument("no matching candidate in " + candidate);
    NetOptions opts;
    opts.c1 = c1;
    opts.num_classes = classes;
    Rng rng(0);
    const NetworkGraph g = build_network(config->arch(), opts, rng);
    write_file(dot, graph_to_dot(g));
    if (!json.empty()) write_file(json, graph_to_json(g).dump(2) + "\n");
    std::cerr << "wrote " << dot << " (" << reachable_blocks(config->arch()).size() << " reachable blocks)\n";
    return kExitOk;
}

}  // namespace

int threads_from_env() {
    const char* s = std::getenv("RELSEARCH_THREADS");
    if (!s || !*s) return 0;
    char* end = nullptr;
    const long v = std::strtol(s, &end, 10);
    if (*end != '\0' || v < 1 || v > 4096) return 0;
    return static_cast<int>(v);
}

int run(int argc, char** argv) {
    CLI::App app{"relsearch: configuration search with a pairwise relation predictor"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    int count = 0;
    std::string in, out, config, vector, predictor, kind = "transformer", dot, json, candidate;
    int id = -1, c1 = 4, classes = 3, n_seeds = 5;
    bool oracle = false, confirm = false;
    std::optional<std::uint64_t> seed_override;
    std::string out_override;

    auto* sample = app.add_subcommand("sample", "Sample random candidates");
    sample->add_option("--seed", seed, "Sampling seed")->required();
    sample->add_option("--count", count, "Number of candidates")->required();
    sample->add_option("--out", out, "Output candidates.jsonl")->required();

    auto* validate = app.add_subcommand("validate", "Validate a candidates file");
    validate->add_option("--in", in, "candidates.jsonl")->required();

    auto* enc = app.add_subcommand("encode", "Print the integer vector of each configuration");
    enc->add_option("--in", in, "Candidates or configuration JSON lines")->required();
    enc->add_option("--out", out, "Output file (default stdout)");

    auto* dec = app.add_subcommand("decode", "Print the configuration JSON of integer vectors");
    dec->add_option("--in", in, "File of space-separated vectors");
    dec->add_option("--vector", vector, "One space-separated vector");
    dec->add_option("--out", out, "Output file (default stdout)");

    auto* evaluate = app.add_subcommand("evaluate", "Evaluate candidates with the configured evaluator");
    evaluate->add_option("--config", config, "Run config JSON")->required();
    evaluate->add_option("--in", in, "candidates.jsonl")->required();
    evaluate->add_option("--out", out, "Evaluated candidates.jsonl")->required();

    auto* train = app.add_subcommand("train-predictor", "Train a predictor on evaluated candidates");
    train->add_option("--config", config, "Run config JSON")->required();
    train->add_option("--in", in, "Evaluated candidates.jsonl")->required();
    train->add_option("--out", out, "Output directory")->required();
    train->add_option("--kind", kind, "transformer, mlp or regressor");

    auto* rank = app.add_subcommand("rank", "Rank candidates by predicted pairwise wins");
    rank->add_option("--predictor", predictor, "predictor.bin")->required();
    rank->add_option("--in", in, "candidates.jsonl")->required();
    rank->add_option("--out", out, "Output ranking.json");

    auto* search = app.add_subcommand("search", "Run the full search and print the top five");
    search->add_option("--config", config, "Run config JSON")->required();
    search->add_option("--out", out_override, "Run directory (overrides paths.out_dir)");
    search->add_option("--seed", seed_override, "Run seed (overrides seed)");
    search->add_flag("--confirm", confirm, "Evaluate the selected configuration");

    auto* ablation = app.add_subcommand("ablation", "Compare the three predictors on the val split");
    ablation->add_option("--config", config, "Run config JSON")->required();
    ablation->add_option("--out", out_override, "Run directory (overrides paths.out_dir)");
    ablation->add_option("--seed", seed_override, "First seed (overrides seed)");
    ablation->add_option("--seeds", n_seeds, "Number of seeds");
    ablation->add_flag("--oracle", oracle, "Rank with the true scores instead of trained predictors");

    auto* exportg = app.add_subcommand("export-graph", "Write the built network as Graphviz DOT");
    exportg->add_option("--candidate", candidate, "Candidates or configuration JSON lines")->required();
    exportg->add_option("--id", id, "Candidate id (default: first line)");
    exportg->add_option("--dot", dot, "Output DOT file")->required();
    exportg->add_option("--json", json, "Also write the graph as JSON");
    exportg->add_option("--c1", c1, "Channels at level 1");
    exportg->add_option("--classes", classes, "Output classes");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitIoOrConfig;
    }

    if (const int t = threads_from_env(); t > 0) omp_set_num_threads(t);

    // Loads the run config and applies flag overrides, recording them.
    auto resolved = [&](nlohmann::ordered_json& overrides) {
        nlohmann::json raw;
        {
            std::ifstream f(config);
            if (!f) throw ConfigError("cannot read config " + config);
            try {
                raw = nlohmann::json::parse(f);
            } catch (const nlohmann::json::parse_error& e) {
                throw ConfigError("config " + config + " is not valid JSON: " + e.what());
            }
        }
        if (seed_override) {
            raw["seed"] = *seed_override;
            overrides["seed"] = *seed_override;
        }
        RunConfig rc = run_config_from_json(raw);
        if (!out_override.empty()) {
            rc.out_dir = out_override;
            overrides["out_dir"] = out_override;
        }
        return rc;
    };

    try {
        if (*sample) return cmd_sample(seed, count, out);
        if (*validate) return cmd_validate(in);
        if (*enc) return cmd_encode(in, out);
        if (*dec) return cmd_decode(in, vector, out);
        if (*evaluate) return cmd_evaluate(load_run_config(config), in, out);
        if (*train) return cmd_train_predictor(load_run_config(config), in, out, kind);
        if (*rank) return cmd_rank(predictor, in, out);
        if (*search) {
            nlohmann::ordered_json overrides = nlohmann::ordered_json::object();
            RunConfig rc = resolved(overrides);
            return cmd_search(std::move(rc), overrides, confirm);
        }
        if (*ablation) {
            nlohmann::ordered_json overrides = nlohmann::ordered_json::object();
            RunConfig rc = resolved(overrides);
            return cmd_ablation(std::move(rc), overrides, n_seeds, oracle);
        }
        if (*exportg) return cmd_export_graph(candidate, id, dot, json, c1, classes);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitIoOrConfig;
    } catch (const ValidationError& e) {
        std::cerr << "invalid: " << e.what() << "\n";
        return kExitValidation;
    } catch (const DecodeError& e) {
        std::cerr << "invalid vector: " << e.what() << "\n";
        return kExitValidation;
    } catch (const PredictorError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const NanGradientError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "malformed JSON: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::out_of_range& e) {
        std::cerr << "invalid: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIoOrConfig;
    }
    return kExitIoOrConfig;
}

}  // namespace relsearch::cli
