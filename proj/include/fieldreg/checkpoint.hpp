#pragma once

#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "fieldreg/cnn.hpp"
#include "fieldreg/errors.hpp"
#include "fieldreg/field.hpp"

#include "json.hpp"

namespace fieldreg {

inline const char* to_string(StemMode m) {
  return m == StemMode::joint ? "joint" : "separate";
}

inline StemMode parse_stem_mode(const std::string& s) {
  if (s == "joint") return StemMode::joint;
  if (s == "separate") return StemMode::separate;
  throw config_error("unknown stem mode '" + s + "'");
}

inline nlohmann::json network_spec_to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["in_h"] = spec.in_h;
  j["in_w"] = spec.in_w;
  j["in_channels"] = spec.in_channels;
  j["stem_mode"] = to_string(spec.stem_mode);
  j["bn_eps"] = spec.bn_eps;
  j["bn_momentum"] = spec.bn_momentum;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : spec.layers) {
    nlohmann::json l;
    if (const auto* c = std::get_if<ConvSpec>(&layer)) {
      l["type"] = "conv";
      l["kernel_h"] = c->kernel_h;
      l["kernel_w"] = c->kernel_w;
      l["in_channels"] = c->in_channels;
      l["out_channels"] = c->out_channels;
      l["stride"] = c->stride;
      l["pad"] = c->pad;
      l["relu_eps"] = c->relu_eps;
    } else if (const auto* d = std::get_if<DenseBlockSpec>(&layer)) {
      l["type"] = "dense";
      l["depth"] = d->depth;
      l["growth"] = d->growth;
      l["kernel"] = d->kernel;
      l["relu_eps"] = d->relu_eps;
    } else {
      const auto& r = std::get<ResizeSpec>(layer);
      l["type"] = "resize";
      l["target_h"] = r.target_h;
      l["target_w"] = r.target_w;
    }
    layers.push_back(std::move(l));
  }
  j["layers"] = std::move(layers);
  return j;
}

inline NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  try {
    spec.in_h = j.at("in_h").get<int>();
    spec.in_w = j.at("in_w").get<int>();
    spec.in_channels = j.at("in_channels").get<int>();
    spec.stem_mode = parse_stem_mode(j.at("stem_mode").get<std::string>());
    spec.bn_eps = j.at("bn_eps").get<double>();
    spec.bn_momentum = j.at("bn_momentum").get<double>();
    for (const auto& l : j.at("layers")) {
      const std::string type = l.at("type").get<std::string>();
      if (type == "conv") {
        ConvSpec c;
        c.kernel_h = l.at("kernel_h").get<int>();
        c.kernel_w = l.at("kernel_w").get<int>();
        c.in_channels = l.at("in_channels").get<int>();
        c.out_channels = l.at("out_channels").get<int>();
        c.stride = l.at("stride").get<int>();
        c.pad = l.at("pad").get<int>();
        c.relu_eps = l.at("relu_eps").get<double>();
        spec.layers.emplace_back(c);
      } else if (type == "dense") {
        DenseBlockSpec d;
        d.depth = l.at("depth").get<int>();
        d.growth = l.at("growth").get<int>();
        d.kernel = l.at("kernel").get<int>();
        d.relu_eps = l.at("relu_eps").get<double>();
        spec.layers.emplace_back(d);
      } else if (type == "resize") {
        ResizeSpec r;
        r.target_h = l.at("target_h").get<int>();
        r.target_w = l.at("target_w").get<int>();
        spec.layers.emplace_back(r);
      } else {
        throw config_error("unknown layer type '" + type + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("network spec: ") + e.what());
  }
  return spec;
}


struct Checkpoint {
  NetworkSpec spec;
  std::uint64_t trained_epochs = 0;
  std::vector<double> params;
  std::vector<double> running;
  std::optional<OptState> opt;
};

namespace detail {

inline void put_f64_vec(std::string& out, const std::vector<double>& v) {
  put_u64(out, v.size());
  for (double x : v) put_f64(out, x);
}

inline std::vector<double> get_f64_vec(Cursor& cur) {
  std::uint64_t n = cur.u64();
  std::vector<double> v(n);
  for (auto& x : v) x = cur.f64();
  return v;
}

}  // namespace detail

/// "FRM1" container: magic, version, trained-epoch counter, the network spec
/// as a length-prefixed JSON document, flat parameters, running stats, and
/// optionally the optimizer state. Byte layout is fixed little-endian, so a
/// write/read cycle is bit-exact.
inline void checkpoint_write(const std::string& path, const Checkpoint& ck) {
  for (double x : ck.params)
    if (!std::isfinite(x)) throw format_error("checkpoint_write: non-finite parameter");
  for (double x : ck.running)
    if (!std::isfinite(x))
      throw format_error("checkpoint_write: non-finite running stat");

  std::string out;
  out += "FRM1";
  detail::put_u32(out, 1);
  detail::put_u64(out, ck.trained_epochs);
  std::string spec_json = network_spec_to_json(ck.spec).dump();
  detail::put_u32(out, static_cast<std::uint32_t>(spec_json.size()));
  out += spec_json;
  detail::put_f64_vec(out, ck.params);
  detail::put_f64_vec(out, ck.running);
  out.push_back(ck.opt ? 1 : 0);
  if (ck.opt) {
    detail::put_u64(out, ck.opt->step);
    detail::put_f64_vec(out, ck.opt->m);
    detail::put_f64_vec(out, ck.opt->v);
  }
  detail::spew(path, out, "checkpoint_write");
}

inline Checkpoint checkpoint_read(const std::string& path) {
  std::vector<unsigned char> bytes = detail::slurp(path, "checkpoint_read");
  detail::Cursor cur{bytes.data(), bytes.size(), 0, "checkpoint_read"};
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "FRM1", 4) != 0)
    throw format_error("checkpoint_read: bad magic, not an FRM1 file");
  cur.pos = 4;
  std::uint32_t version = cur.u32();
  if (version != 1)
    throw format_error("checkpoint_read: unsupported version " +
                       std::to_string(version));
  Checkpoint ck;
  ck.trained_epochs = cur.u64();
  std::uint32_t spec_len = cur.u32();
  if (cur.pos + spec_len > bytes.size())
    throw format_error("checkpoint_read: truncated file inside spec document");
  nlohmann::json spec_json;
  try {
    spec_json = nlohmann::json::parse(
        std::string(reinterpret_cast<const char*>(bytes.data()) + cur.pos, spec_len));
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("checkpoint_read: spec document unreadable: ") +
                       e.what());
  }
  ck.spec = network_spec_from_json(spec_json);
  cur.pos += spec_len;
  ck.params = detail::get_f64_vec(cur);
  ck.running = detail::get_f64_vec(cur);
  cur.need(1);
  std::uint8_t has_opt = cur.p[cur.pos++];
  if (has_opt > 1) throw format_error("checkpoint_read: corrupt optimizer flag");
  if (has_opt) {
    OptState opt;
    opt.step = cur.u64();
    opt.m = detail::get_f64_vec(cur);
    opt.v = detail::get_f64_vec(cur);
    ck.opt = std::move(opt);
  }
  if (cur.pos != bytes.size())
    throw format_error("checkpoint_read: trailing bytes after payload");

  Network net(ck.spec);
  if (ck.params.size() != net.param_count() || ck.running.size() != net.running_count())
    throw format_error("checkpoint_read: payload length disagrees with spec");
  if (ck.opt && (ck.opt->m.size() != ck.params.size() ||
                 ck.opt->v.size() != ck.params.size()))
    throw format_error("checkpoint_read: optimizer state length mismatch");
  return ck;
}

/// Describes the first structural difference between two specs, or returns
/// an empty string when they can carry the same parameter payload.
inline std::string first_spec_mismatch(const NetworkSpec& want, const NetworkSpec& got) {
  auto layer_name = [](std::size_t i) { return "layer " + std::to_string(i); };
  if (want.in_h != got.in_h || want.in_w != got.in_w ||
      want.in_channels != got.in_channels)
    return "input schema " + std::to_string(got.in_h) + "x" + std::to_string(got.in_w) +
           "x" + std::to_string(got.in_channels) + ", expected " +
           std::to_string(want.in_h) + "x" + std::to_string(want.in_w) + "x" +
           std::to_string(want.in_channels);
  if (want.stem_mode != got.stem_mode)
    return std::string("stem mode ") + to_string(got.stem_mode) + ", expected " +
           to_string(want.stem_mode);
  std::size_t common = std::min(want.layers.size(), got.layers.size());
  for (std::size_t i = 0; i < common; ++i) {
    const auto& a = want.layers[i];
    const auto& b = got.layers[i];
    if (a.index() != b.index()) return layer_name(i) + ": different layer kind";
    if (const auto* ca = std::get_if<ConvSpec>(&a)) {
      const auto& cb = std::get<ConvSpec>(b);
      if (ca->kernel_h != cb.kernel_h || ca->kernel_w != cb.kernel_w ||
          ca->in_channels != cb.in_channels || ca->out_channels != cb.out_channels ||
          ca->stride != cb.stride || ca->pad != cb.pad)
        return layer_name(i) + ": conv geometry differs";
    } else if (const auto* da = std::get_if<DenseBlockSpec>(&a)) {
      const auto& db = std::get<DenseBlockSpec>(b);
      if (da->depth != db.depth || da->growth != db.growth || da->kernel != db.kernel)
        return layer_name(i) + ": dense block geometry differs";
    } else {
      const auto& ra = std::get<ResizeSpec>(a);
      const auto& rb = std::get<ResizeSpec>(b);
      if (ra.target_h != rb.target_h || ra.target_w != rb.target_w)
        return layer_name(i) + ": resize target differs";
    }
  }
  if (want.layers.size() != got.layers.size())
    return layer_name(common) + ": present in only one spec";
  return "";
}

/// Loads a checkpoint that must structurally match an existing network.
inline Checkpoint checkpoint_read_for(const std::string& path, const Network& net) {
  Checkpoint ck = checkpoint_read(path);
  std::string diff = first_spec_mismatch(net.spec(), ck.spec);
  if (!diff.empty()) throw format_error("checkpoint_read: spec mismatch at " + diff);
  return ck;
}

}  // namespace fieldreg
