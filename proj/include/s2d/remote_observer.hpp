#pragma once

// Observer wire protocol: newline-delimited JSON over a child process's stdio.
//
//   -> {"op":"hello","version":1}            <- {"ok":true,"version":1,"dim":d,"layers":L}
//   -> {"op":"forward","ids":[..],"v":[..],"cfg":{"k":K,"n":N,"layer":ls}}   <- {"f":[..]}
//   -> {"op":"vjp","ids":[..],"v":[..],"u":[..],"cfg":{..}}                 <- {"g":[..]}
//   -> {"op":"shutdown"}                      <- {"ok":true}
//
// A reply carrying "error" aborts the call.

#include <istream>
#include <memory>
#include <mutex>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "observer.hpp"
#include "subprocess.hpp"

namespace s2d {

inline constexpr int kObserverProtocolVersion = 1;

namespace wire {

using nlohmann::json;

inline json to_json(const Vector& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

inline json to_json(const ExtractionConfig& cfg) {
  return {{"k", cfg.token_fraction}, {"n", cfg.layer_count}, {"layer", cfg.steer_layer}};
}

inline ExtractionConfig extraction_from_json(const json& j) {
  ExtractionConfig cfg;
  cfg.token_fraction = j.at("k").get<double>();
  cfg.layer_count = j.at("n").get<int>();
  cfg.steer_layer = j.at("layer").get<int>();
  return cfg;
}

inline TokenSeq tokens_from_json(const json& j) { return {j.get<std::vector<std::uint32_t>>()}; }

/// Vector of exactly `dim` finite numbers, else ProtocolError.
inline Vector vector_from_json(const json& j, int dim, const char* field) {
  if (!j.is_array()) throw ProtocolError(std::string("reply field '") + field + "' is not an array");
  if (static_cast<int>(j.size()) != dim)
    throw ProtocolError(std::string("reply field '") + field + "' has " + std::to_string(j.size()) +
                        " entries, expected " + std::to_string(dim));
  Vector v(dim);
  for (int i = 0; i < dim; ++i) {
    if (!j[static_cast<std::size_t>(i)].is_number())
      throw ProtocolError(std::string("reply field '") + field + "' holds a non-number");
    v[i] = j[static_cast<std::size_t>(i)].get<double>();
  }
  if (!v.allFinite()) throw ProtocolError(std::string("reply field '") + field + "' holds a non-finite value");
  return v;
}

} // namespace wire

/// Observer proxied to a backend process. One request is in flight at a time;
/// concurrent callers queue on an internal mutex.
class RemoteObserver final : public Observer {
public:
  explicit RemoteObserver(const std::string& spawn_command)
      : child_(std::make_unique<ChildProcess>(spawn_command)) {
    const auto reply = request({{"op", "hello"}, {"version", kObserverProtocolVersion}});
    try {
      if (!reply.value("ok", false)) throw ProtocolError("handshake: backend did not acknowledge hello");
      const int version = reply.at("version").get<int>();
      if (version != kObserverProtocolVersion)
        throw ProtocolError("handshake: backend speaks version " + std::to_string(version) + ", expected " +
                            std::to_string(kObserverProtocolVersion));
      dim_ = reply.at("dim").get<int>();
      layers_ = reply.at("layers").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("handshake: malformed reply: ") + e.what());
    }
    if (dim_ < 2 || layers_ < 1) throw ProtocolError("handshake: invalid dim/layers");
  }

  ~RemoteObserver() override {
    try {
      std::lock_guard lock(mutex_);
      child_->write_line(nlohmann::json{{"op", "shutdown"}}.dump());
      (void)child_->read_line();
    } catch (...) {
    }
  }

  RemoteObserver(const RemoteObserver&) = delete;
  RemoteObserver& operator=(const RemoteObserver&) = delete;

  int dim() const override { return dim_; }
  int layers() const override { return layers_; }

  HiddenStates hidden_states(const TokenSeq&, const SteeringVector&, const ExtractionConfig&) const override {
    throw ProtocolError("hidden states are not exposed by the observer protocol");
  }

  UnitVector steered_repr(const TokenSeq& x, const SteeringVector& v, const ExtractionConfig& cfg) const override {
    detail::check_steering(v, dim_);
    const auto reply = request({{"op", "forward"}, {"ids", x.ids}, {"v", wire::to_json(v)}, {"cfg", wire::to_json(cfg)}});
    if (!reply.contains("f")) throw ProtocolError("forward: reply lacks 'f'");
    return detail::normalize_pooled(wire::vector_from_json(reply["f"], dim_, "f"));
  }

  Vector vjp_v(const TokenSeq& x, const SteeringVector& v, const Vector& u,
               const ExtractionConfig& cfg) const override {
    detail::check_steering(v, dim_);
    require_same_dim(u.size(), dim_, "vjp_v cotangent");
    const auto reply = request({{"op", "vjp"},
                                {"ids", x.ids},
                                {"v", wire::to_json(v)},
                                {"u", wire::to_json(u)},
                                {"cfg", wire::to_json(cfg)}});
    if (!reply.contains("g")) throw ProtocolError("vjp: reply lacks 'g'");
    return wire::vector_from_json(reply["g"], dim_, "g");
  }

private:
  nlohmann::json request(const nlohmann::json& msg) const {
    std::lock_guard lock(mutex_);
    child_->write_line(msg.dump());
    const auto line = child_->read_line();
    if (!line) throw TransportError("observer backend closed its output (process exited?)");
    nlohmann::json reply;
    try {
      reply = nlohmann::json::parse(*line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ProtocolError(std::string("malformed reply: ") + e.what());
    }
    if (!reply.is_object()) throw ProtocolError("reply is not a JSON object");
    if (reply.contains("error"))
      throw ProtocolError("backend error: " + (reply["error"].is_string() ? reply["error"].get<std::string>()
                                                                           : reply["error"].dump()));
    return reply;
  }

  std::unique_ptr<ChildProcess> child_;
  mutable std::mutex mutex_;
  int dim_ = 0;
  int layers_ = 0;
};

/// Answers the observer protocol for `obs` on the given streams until
/// shutdown or end of input. Bad requests get an {"error": ...} reply and
/// the loop continues. Returns the process exit code.
inline int serve_observer(const Observer& obs, std::istream& in, std::ostream& out) {
  using nlohmann::json;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json reply;
    bool stop = false;
    try {
      const json req = json::parse(line);
      const std::string op = req.at("op").get<std::string>();
      if (op == "hello") {
        const int version = req.at("version").get<int>();
        if (version != kObserverProtocolVersion)
          reply = {{"error", "unsupported protocol version " + std::to_string(version)}};
        else
          reply = {{"ok", true}, {"version", kObserverProtocolVersion}, {"dim", obs.dim()}, {"layers", obs.layers()}};
      } else if (op == "forward") {
        const auto x = wire::tokens_from_json(req.at("ids"));
        const auto v = wire::vector_from_json(req.at("v"), obs.dim(), "v");
        const auto f = obs.steered_repr(x, v, wire::extraction_from_json(req.at("cfg")));
        reply = {{"f", wire::to_json(f.coords())}};
      } else if (op == "vjp") {
        const auto x = wire::tokens_from_json(req.at("ids"));
        const auto v = wire::vector_from_json(req.at("v"), obs.dim(), "v");
        const auto u = wire::vector_from_json(req.at("u"), obs.dim(), "u");
        reply = {{"g", wire::to_json(obs.vjp_v(x, v, u, wire::extraction_from_json(req.at("cfg"))))}};
      } else if (op == "shutdown") {
        reply = {{"ok", true}};
        stop = true;
      } else {
        reply = {{"error", "unknown op '" + op + "'"}};
      }
    } catch (const std::exception& e) {
      reply = {{"error", e.what()}};
    }
    out << reply.dump() << '\n' << std::flush;
    if (stop) break;
  }
  return 0;
}

} // namespace s2d
