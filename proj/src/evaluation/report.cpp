#include "faultsim/evaluation/experiment.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace faultsim::evaluation {

extern const char* const kReportSchemaText;

namespace {

inline constexpr int kSchemaVersion = 1;

nlohmann::json summary_json(const vae::StateSummary& s) {
    return {{"count", s.count},
            {"modal_location", s.modal_location},
            {"modal_subfamily", s.modal_subfamily},
            {"mean_odometer_miles", s.mean_odometer_miles},
            {"mean_engine_hours", s.mean_engine_hours},
            {"fault_fraction", s.fault_fraction}};
}

// Reference values measured on the full-scale field fleet; not reproduced here.
nlohmann::json full_scale_reference() {
    return {{"mean_auc", {{"stam_only", 0.950}, {"stam_plus_vae", 0.978}, {"lstm_direct", 0.520}, {"stam_direct", 0.458}}},
            {"relative_improvement", 0.028},
            {"ttf_r_squared", 0.77},
            {"ttf_max_abs_error_seconds", 240.0},
            {"state_rates", {0.080, 0.078, 0.069, 0.111, 0.098}},
            {"attention",
             {{"no_fault", {{"engine", 0.480}, {"transmission", 0.520}}},
              {"fault_observed", {{"engine", 0.515}, {"transmission", 0.485}}}}}};
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out << std::setprecision(17);
    return out;
}

std::string type_of(const nlohmann::json& v) {
    switch (v.type()) {
    case nlohmann::json::value_t::null: return "null";
    case nlohmann::json::value_t::boolean: return "boolean";
    case nlohmann::json::value_t::number_integer:
    case nlohmann::json::value_t::number_unsigned: return "integer";
    case nlohmann::json::value_t::number_float: return "number";
    case nlohmann::json::value_t::string: return "string";
    case nlohmann::json::value_t::array: return "array";
    case nlohmann::json::value_t::object: return "object";
    default: return "unknown";
    }
}

bool type_matches(const nlohmann::json& v, const std::string& t) {
    const auto actual = type_of(v);
    return actual == t || (t == "number" && actual == "integer");
}

void validate_at(const nlohmann::json& doc, const nlohmann::json& schema, const nlohmann::json& root,
                 const std::string& path, std::vector<std::string>& errors) {
    const std::string where = path.empty() ? "/" : path;
    if (schema.contains("$ref")) {
        const auto ref = schema["$ref"].get<std::string>();
        if (ref.rfind("#", 0) != 0) {
            throw std::invalid_argument("validate_json: only local $ref is supported, got " + ref);
        }
        validate_at(doc, root.at(nlohmann::json::json_pointer(ref.substr(1))), root, path, errors);
        return;
    }
    if (schema.contains("type")) {
        const auto& t = schema["type"];
        bool ok = false;
        if (t.is_array()) {
            for (const auto& one : t) {
                ok = ok || type_matches(doc, one.get<std::string>());
            }
        } else {
            ok = type_matches(doc, t.get<std::string>());
        }
        if (!ok) {
            errors.push_back(where + ": expected type " + t.dump() + ", got " + type_of(doc));
            return;
        }
    }
    if (schema.contains("enum")) {
        const auto& e = schema["enum"];
        if (std::find(e.begin(), e.end(), doc) == e.end()) {
            errors.push_back(where + ": value " + doc.dump() + " not in " + e.dump());
        }
    }
    if (doc.is_number()) {
        const double x = doc.get<double>();
        if (schema.contains("minimum") && x < schema["minimum"].get<double>()) {
            errors.push_back(where + ": " + doc.dump() + " below minimum " + schema["minimum"].dump());
        }
        if (schema.contains("maximum") && x > schema["maximum"].get<double>()) {
            errors.push_back(where + ": " + doc.dump() + " above maximum " + schema["maximum"].dump());
        }
    }
    if (doc.is_object()) {
        if (schema.contains("required")) {
            for (const auto& key : schema["required"]) {
                if (!doc.contains(key.get<std::string>())) {
                    errors.push_back(where + ": missing required key " + key.dump());
                }
            }
        }
        const auto props = schema.value("properties", nlohmann::json::object());
        for (const auto& [key, value] : doc.items()) {
            const auto child = path + "/" + key;
            if (props.contains(key)) {
                validate_at(value, props[key], root, child, errors);
            } else if (schema.contains("additionalProperties")) {
                const auto& extra = schema["additionalProperties"];
                if (extra.is_boolean()) {
                    if (!extra.get<bool>()) {
                        errors.push_back(where + ": unexpected key \"" + key + "\"");
                    }
                } else {
                    validate_at(value, extra, root, child, errors);
                }
            }
        }
    }
    if (doc.is_array()) {
        if (schema.contains("minItems") && doc.size() < schema["minItems"].get<std::size_t>()) {
            errors.push_back(where + ": fewer than " + schema["minItems"].dump() + " items");
        }
        if (schema.contains("items")) {
            for (std::size_t i = 0; i < doc.size(); ++i) {
                validate_at(doc[i], schema["items"], root, path + "/" + std::to_string(i), errors);
            }
        }
    }
}

} // namespace

nlohmann::json to_json(const ExperimentReport& r) {
    nlohmann::json j;
    j["schema_version"] = kSchemaVersion;
    j["seed"] = r.seed;
    j["config_hash"] = r.config_hash;
    j["scale"] = r.scale;
    j["windows"] = r.windows;
    j["positive_windows"] = r.positive_windows;

    auto& modes = j["modes"] = nlohmann::json::object();
    for (const auto& m : r.results) {
        modes[to_string(m.mode)] = {{"mean_auc", m.mean_auc},
                                    {"split_auc", m.split_auc},
                                    {"permutation_mean_auc", m.permutation_mean_auc},
                                    {"permutation_split_auc", m.permutation_split_auc}};
    }
    j["primary_mode"] = r.modes.empty() ? nlohmann::json(nullptr) : nlohmann::json(to_string(r.modes.front()));
    const auto* primary = r.modes.empty() ? nullptr : r.result(r.modes.front());
    j["mean_auc"] = primary ? nlohmann::json(primary->mean_auc) : nlohmann::json(nullptr);

    const auto* so = r.result(Mode::stam_only);
    const auto* sv = r.result(Mode::stam_plus_vae);
    if (so && sv) {
        j["improvement"] = {{"absolute", sv->mean_auc - so->mean_auc},
                            {"relative", so->mean_auc > 0.0 ? sv->mean_auc / so->mean_auc - 1.0 : 0.0}};
    } else {
        j["improvement"] = nullptr;
    }

    j["ttf"] = {{"evaluated", r.ttf.evaluated},
                {"notice", r.ttf.notice},
                {"positives", r.ttf.positives},
                {"r_squared", r.ttf.evaluated ? nlohmann::json(r.ttf.r_squared) : nlohmann::json(nullptr)},
                {"mean_baseline_r_squared",
                 r.ttf.evaluated ? nlohmann::json(r.ttf.mean_baseline_r_squared) : nlohmann::json(nullptr)},
                {"max_abs_error_seconds",
                 r.ttf.evaluated ? nlohmann::json(r.ttf.max_abs_error_seconds) : nlohmann::json(nullptr)},
                {"mean_abs_error_seconds",
                 r.ttf.evaluated ? nlohmann::json(r.ttf.mean_abs_error_seconds) : nlohmann::json(nullptr)}};

    const bool have_stam = so || sv;
    j["covariate_forecast"] = have_stam ? nlohmann::json{{"stam_mse", r.stam_mse}, {"lvcf_mse", r.lvcf_mse}}
                                        : nlohmann::json(nullptr);

    auto& rates = j["state_rates"] = nlohmann::json::array();
    for (const auto& s : r.state_rates) {
        rates.push_back({{"state", s.state},
                         {"samples", s.samples},
                         {"positives", s.positives},
                         {"rate", s.rate},
                         {"metadata", summary_json(s.summary)}});
    }
    if (r.latent) {
        j["global_metadata"] = summary_json(vae::global_summary(*r.latent));
    } else {
        j["global_metadata"] = nullptr;
    }

    auto& att = j["attention"] = nlohmann::json::object();
    att["notice"] = r.attention_notice;
    att["subsystems"] = nlohmann::json::array();
    att["rows"] = nlohmann::json::object();
    if (r.attention) {
        att["subsystems"] = r.attention->subsystems;
        for (const auto& [ctx, mass] : r.attention->rows) {
            att["rows"][ctx] = mass;
        }
    }

    auto& loss = j["loss_histories"] = nlohmann::json::object();
    loss["deepar"] = r.deepar_loss;
    loss["lstm_direct"] = r.lstm_loss;
    loss["vae"] = {{"elbo", r.vae_history.elbo},
                   {"reconstruction", r.vae_history.reconstruction},
                   {"kl", r.vae_history.kl},
                   {"mse", r.vae_history.mse}};

    j["full_scale_reference"] = full_scale_reference();
    return j;
}

void emit_report(const ExperimentReport& r, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir)) {
        throw std::runtime_error("cannot create output directory " + out_dir.string());
    }
    {
        auto out = open_out(out_dir / "report.json");
        out << to_json(r).dump(2) << '\n';
    }
    for (const auto& m : r.results) {
        for (std::size_t s = 0; s < m.roc.size(); ++s) {
            auto out = open_out(out_dir / ("roc_" + to_string(m.mode) + "_" + std::to_string(s) + ".csv"));
            out << "fpr,tpr,threshold\n";
            for (const auto& p : m.roc[s]) {
                out << p.fpr << ',' << p.tpr << ',' << p.threshold << '\n';
            }
        }
    }
    std::map<std::string, bool> vehicles;
    for (const auto& [id, l] : r.deepar_loss) {
        vehicles[id] = true;
    }
    for (const auto& [id, l] : r.lstm_loss) {
        vehicles[id] = true;
    }
    for (const auto& [id, unused] : vehicles) {
        (void)unused;
        const auto d = r.deepar_loss.find(id);
        const auto l = r.lstm_loss.find(id);
        const std::size_t n = std::max(d == r.deepar_loss.end() ? 0 : d->second.size(),
                                       l == r.lstm_loss.end() ? 0 : l->second.size());
        auto out = open_out(out_dir / ("loss_history_" + id + ".csv"));
        out << "epoch,deepar_loss,lstm_direct_loss\n";
        for (std::size_t e = 0; e < n; ++e) {
            out << e << ',';
            if (d != r.deepar_loss.end() && e < d->second.size()) {
                out << d->second[e];
            }
            out << ',';
            if (l != r.lstm_loss.end() && e < l->second.size()) {
                out << l->second[e];
            }
            out << '\n';
        }
    }
    if (!r.vae_history.elbo.empty()) {
        auto out = open_out(out_dir / "loss_history_vae.csv");
        out << "epoch,elbo,reconstruction,kl,mse\n";
        for (std::size_t e = 0; e < r.vae_history.elbo.size(); ++e) {
            out << e << ',' << r.vae_history.elbo[e] << ',' << r.vae_history.reconstruction[e] << ','
                << r.vae_history.kl[e] << ',' << r.vae_history.mse[e] << '\n';
        }
    }
    if (r.latent) {
        vae::write_latent_csv(*r.latent, out_dir / "latent.csv");
    } else {
        auto out = open_out(out_dir / "latent.csv");
        out << "vehicle_id,t0,z1,z2,z3,state,fault_in_window,location,odometer_miles,engine_hours,subfamily\n";
    }
    {
        auto out = open_out(out_dir / "attention.csv");
        out << "context,subsystem,mean_weight\n";
        if (r.attention) {
            for (const auto& [ctx, mass] : r.attention->rows) {
                for (std::size_t i = 0; i < mass.size(); ++i) {
                    out << ctx << ',' << r.attention->subsystems[i] << ',' << mass[i] << '\n';
                }
            }
        }
    }
    {
        auto out = open_out(out_dir / "state_rates.csv");
        out << "state,samples,positives,rate,count,modal_location,modal_subfamily,mean_odometer_miles,"
               "mean_engine_hours,fault_fraction\n";
        for (const auto& s : r.state_rates) {
            out << s.state << ',' << s.samples << ',' << s.positives << ',' << s.rate << ',' << s.summary.count << ','
                << s.summary.modal_location << ',' << s.summary.modal_subfamily << ','
                << s.summary.mean_odometer_miles << ',' << s.summary.mean_engine_hours << ','
                << s.summary.fault_fraction << '\n';
        }
    }
}

const nlohmann::json& report_schema() {
    static const nlohmann::json schema = nlohmann::json::parse(kReportSchemaText);
    return schema;
}

std::vector<std::string> validate_json(const nlohmann::json& doc, const nlohmann::json& schema) {
    std::vector<std::string> errors;
    validate_at(doc, schema, schema, "", errors);
    return errors;
}

} // namespace faultsim::evaluation
