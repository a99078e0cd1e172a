#include "dilseg/netspec.hpp"

#include <nlohmann/json.hpp>

#include "dilseg/ops.hpp"

namespace dilseg {

namespace {

[[noreturn]] void parse_fail(const std::string& text, std::size_t pos,
                             const std::string& why) {
  throw std::invalid_argument("parse_layer: \"" + text + "\" at position " +
                              std::to_string(pos) + ": " + why);
}

// Consumes "<key><int>" starting at pos.
int parse_field(const std::string& text, std::size_t& pos, char key) {
  if (pos >= text.size() || text[pos] != '-')
    parse_fail(text, pos, std::string("expected '-") + key + "<int>'");
  ++pos;
  if (pos >= text.size() || text[pos] != key)
    parse_fail(text, pos, std::string("expected field '") + key + "'");
  ++pos;
  std::size_t digits = 0;
  long v = 0;
  while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') {
    v = v * 10 + (text[pos] - '0');
    ++pos;
    ++digits;
  }
  if (digits == 0) parse_fail(text, pos, "expected integer");
  if (v <= 0) parse_fail(text, pos, "field must be positive");
  return static_cast<int>(v);
}

}  // namespace

LayerSpec parse_layer(const std::string& text) {
  if (text == "maxpooling" || text == "max pooling") {
    LayerSpec l;
    l.kind = LayerKind::MaxPool;
    l.kernel = 2;
    return l;
  }
  LayerSpec l;
  std::size_t pos = 0;
  if (text.rfind("deconv", 0) == 0) {
    l.kind = LayerKind::Deconv;
    pos = 6;
  } else if (text.rfind("conv", 0) == 0) {
    l.kind = LayerKind::Conv;
    pos = 4;
  } else {
    parse_fail(text, 0, "unknown layer kind");
  }
  l.out_channels = parse_field(text, pos, 'n');
  l.kernel = parse_field(text, pos, 'k');
  l.dilation_factor = parse_field(text, pos, 'd');
  if (pos != text.size()) parse_fail(text, pos, "trailing characters");
  return l;
}

std::string render_layer(const LayerSpec& layer) {
  switch (layer.kind) {
    case LayerKind::MaxPool:
      return "maxpooling";
    case LayerKind::Conv:
      return "conv-n" + std::to_string(layer.out_channels) + "-k" +
             std::to_string(layer.kernel) + "-d" +
             std::to_string(layer.dilation_factor);
    case LayerKind::Deconv:
      return "deconv-n" + std::to_string(layer.out_channels) + "-k" +
             std::to_string(layer.kernel) + "-d" +
             std::to_string(layer.dilation_factor);
  }
  throw std::logic_error("unreachable");
}

std::vector<LayerSpec> NetworkSpec::all_layers() const {
  std::vector<LayerSpec> all = front;
  all.insert(all.end(), lfe.begin(), lfe.end());
  all.insert(all.end(), head.begin(), head.end());
  return all;
}

bool NetworkSpec::has_pooling() const {
  for (const auto& l : all_layers())
    if (l.kind == LayerKind::MaxPool) return true;
  return false;
}

bool NetworkSpec::stride1() const {
  for (const auto& l : all_layers())
    if (l.kind != LayerKind::Conv) return false;
  return true;
}

int NetworkSpec::downsample_factor() const {
  int f = 1;
  for (const auto& l : front)
    if (l.kind == LayerKind::MaxPool) f *= 2;
  return f;
}

std::string NetworkSpec::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  for (const char* part : {"front", "lfe", "head"}) j[part] = nlohmann::json::array();
  for (const auto& l : front) j["front"].push_back(render_layer(l));
  for (const auto& l : lfe) j["lfe"].push_back(render_layer(l));
  for (const auto& l : head) j["head"].push_back(render_layer(l));
  j["input_patch"] = input_patch;
  j["supervised_center"] = supervised_center;
  return j.dump(2);
}

NetworkSpec NetworkSpec::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  NetworkSpec s;
  s.name = j.at("name").get<std::string>();
  for (const auto& t : j.at("front")) s.front.push_back(parse_layer(t.get<std::string>()));
  for (const auto& t : j.at("lfe")) s.lfe.push_back(parse_layer(t.get<std::string>()));
  for (const auto& t : j.at("head")) s.head.push_back(parse_layer(t.get<std::string>()));
  s.input_patch = j.value("input_patch", 76);
  s.supervised_center = j.value("supervised_center", 16);
  finalize_network(s);
  return s;
}

void finalize_network(NetworkSpec& spec) {
  auto all = spec.all_layers();
  if (all.empty()) throw std::invalid_argument("network has no layers");
  // front dilation factors non-decreasing (for dilated variants), LFE
  // non-increasing: the defining shapes of the two modules.
  int prev = 0;
  for (const auto& l : spec.front) {
    if (l.kind != LayerKind::Conv) continue;
    if (prev != 0 && l.dilation_factor < prev && !spec.has_pooling())
      throw std::invalid_argument("front dilation factors must be non-decreasing");
    prev = l.dilation_factor;
  }
  prev = 0;
  for (const auto& l : spec.lfe) {
    if (prev != 0 && l.dilation_factor > prev)
      throw std::invalid_argument("LFE dilation factors must be non-increasing");
    prev = l.dilation_factor;
  }
  for (auto* part : {&spec.front, &spec.lfe, &spec.head})
    for (auto& l : *part) {
      if (l.kind == LayerKind::MaxPool && l.kernel != 2)
        throw std::invalid_argument("maxpool is always 2x2 stride 2");
      l.activation = l.kind == LayerKind::MaxPool ? Activation::None
                                                  : Activation::Relu;
    }
  if (spec.head.empty()) throw std::invalid_argument("network head is empty");
  spec.head.back().activation = Activation::Softmax;
}

namespace {

LayerSpec conv(int n, int k, int d) {
  LayerSpec l;
  l.kind = LayerKind::Conv;
  l.out_channels = n;
  l.kernel = k;
  l.dilation_factor = d;
  return l;
}

LayerSpec pool() {
  LayerSpec l;
  l.kind = LayerKind::MaxPool;
  l.kernel = 2;
  return l;
}

LayerSpec deconv(int n, int k) {
  LayerSpec l;
  l.kind = LayerKind::Deconv;
  l.out_channels = n;
  l.kernel = k;
  return l;
}

std::vector<LayerSpec> repeat(int count, LayerSpec l) {
  return std::vector<LayerSpec>(count, l);
}

void append(std::vector<LayerSpec>& dst, const std::vector<LayerSpec>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

}  // namespace

NetworkSpec preset(const std::string& name, Scale scale) {
  NetworkSpec s;
  s.name = name;

  // VGG-style blocks below the third (small FOV) or fourth (large FOV)
  // pooling layer; dilated twins drop the pools and raise dilation factors
  // to keep the field of view.
  if (name == "front-s") {
    s.front = {conv(64, 3, 1),  conv(64, 3, 1),  pool(),
               conv(128, 3, 1), conv(128, 3, 1), pool(),
               conv(256, 3, 1), conv(256, 3, 1), conv(256, 3, 1)};
    s.head = {conv(1024, 9, 1), conv(1024, 1, 1), deconv(2, 16)};
  } else if (name == "front-l") {
    s.front = {conv(64, 3, 1),  conv(64, 3, 1),  pool(),
               conv(128, 3, 1), conv(128, 3, 1), pool(),
               conv(256, 3, 1), conv(256, 3, 1), conv(256, 3, 1), pool(),
               conv(512, 3, 1), conv(512, 3, 1), conv(512, 3, 1)};
    s.head = {conv(1024, 9, 1), conv(1024, 1, 1), deconv(2, 16)};
  } else if (name.rfind("front-s-d", 0) == 0 || name.rfind("front-l-d", 0) == 0) {
    const bool large_fov = name[6] == 'l';
    s.front = {conv(64, 3, 1), conv(64, 3, 1), conv(128, 3, 2), conv(128, 3, 2),
               conv(256, 3, 3), conv(256, 3, 3), conv(256, 3, 3)};
    int top_d = 3, top_n = 256;
    if (large_fov) {
      append(s.front, repeat(3, conv(512, 3, 4)));
      top_d = 4;
      top_n = 512;
    }
    s.head = {conv(1024, 7, top_d), conv(1024, 1, 1), conv(2, 1, 1)};

    const std::string suffix = name.substr(9);
    if (suffix == "-lfe") {
      // mirror of the front profile: factors run back down to 1
      for (auto it = s.front.rbegin(); it != s.front.rend(); ++it)
        s.lfe.push_back(conv(top_n, 3, it->dilation_factor));
    } else if (suffix == "-large") {
      // same depth and width as the LFE twin, factors held at the top value
      s.lfe = repeat(large_fov ? 10 : 7, conv(top_n, 3, top_d));
    } else if (suffix == "-lfe4") {
      append(s.lfe, repeat(2, conv(top_n, 3, 2)));
      append(s.lfe, repeat(2, conv(top_n, 3, 1)));
    } else if (!suffix.empty()) {
      throw std::invalid_argument("unknown preset \"" + name + "\"; valid: " +
                                  [] {
                                    std::string all;
                                    for (const auto& n : preset_names_all())
                                      all += n + " ";
                                    return all;
                                  }());
    }
  } else {
    std::string all;
    for (const auto& n : preset_names_all()) all += n + " ";
    throw std::invalid_argument("unknown preset \"" + name + "\"; valid: " + all);
  }

  if (scale == Scale::Micro) {
    for (auto* part : {&s.front, &s.lfe, &s.head})
      for (auto& l : *part)
        if (l.kind != LayerKind::MaxPool)
          l.out_channels = std::max(2, l.out_channels / 8);
  }
  finalize_network(s);
  return s;
}

std::vector<std::string> preset_names() {
  return {"front-s",       "front-l",       "front-s-d",       "front-l-d",
          "front-s-d-lfe", "front-l-d-lfe", "front-s-d-large", "front-l-d-large"};
}

std::vector<std::string> preset_names_all() {
  auto n = preset_names();
  n.push_back("front-s-d-lfe4");
  n.push_back("front-l-d-lfe4");
  return n;
}

std::size_t parameter_count(const NetworkSpec& spec, int in_channels) {
  std::size_t total = 0;
  int cin = in_channels;
  for (const auto& l : spec.all_layers()) {
    if (l.kind == LayerKind::MaxPool) continue;
    total += static_cast<std::size_t>(l.kernel) * l.kernel * cin * l.out_channels;
    if (l.kind == LayerKind::Conv) total += l.out_channels;  // bias
    cin = l.out_channels;
  }
  return total;
}

std::vector<int> trace_extents(const NetworkSpec& spec, int input_extent,
                               bool valid_mode) {
  std::vector<int> extents;
  int e = input_extent;
  const int up = spec.downsample_factor();
  for (const auto& l : spec.all_layers()) {
    switch (l.kind) {
      case LayerKind::Conv:
        if (valid_mode)
          e -= (l.kernel - 1) * ConvParams::rate_of_factor(l.dilation_factor);
        break;
      case LayerKind::MaxPool:
        e = (e + 1) / 2;
        break;
      case LayerKind::Deconv:
        e *= up;
        break;
    }
    if (e <= 0)
      throw std::invalid_argument("network consumes the whole input at extent " +
                                  std::to_string(input_extent));
    extents.push_back(e);
  }
  return extents;
}

}  // namespace dilseg
