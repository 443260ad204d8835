#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace vd {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension contract violations on tensor operations.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// A flow asked for layers the model does not route (wrong modality pairing).
struct RoutingError : Error {
    explicit RoutingError(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Checksum mismatch on checkpoint load; kept distinct from generic IoError
// so callers can tell corruption from missing/short files.
struct CrcError : IoError {
    explicit CrcError(const std::string& msg) : IoError(msg) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

enum class Modality { Image, Text };

inline const char* modality_name(Modality m) {
    return m == Modality::Image ? "image" : "text";
}

// One generation task: synthesize `output` conditioned on `context`.
struct FlowSpec {
    Modality output;
    Modality context;

    bool operator==(const FlowSpec&) const = default;
};

inline FlowSpec flow_t2i() { return {Modality::Image, Modality::Text}; }
inline FlowSpec flow_iv()  { return {Modality::Image, Modality::Image}; }
inline FlowSpec flow_i2t() { return {Modality::Text, Modality::Image}; }
inline FlowSpec flow_tv()  { return {Modality::Text, Modality::Text}; }

inline std::string flow_name(const FlowSpec& f) {
    if (f == flow_t2i()) return "t2i";
    if (f == flow_iv())  return "iv";
    if (f == flow_i2t()) return "i2t";
    return "tv";
}

inline FlowSpec flow_from_name(const std::string& name) {
    if (name == "t2i") return flow_t2i();
    if (name == "iv")  return flow_iv();
    if (name == "i2t") return flow_i2t();
    if (name == "tv")  return flow_tv();
    throw ConfigError("unknown flow name: " + name);
}

// Canonical flow order: data modalities outer, context modalities inner.
inline std::vector<FlowSpec> all_flows() {
    return {flow_iv(), flow_t2i(), flow_i2t(), flow_tv()};
}

// Parameter taxonomy: always-active, output-dependent, context-dependent.
enum class LayerGroup : unsigned char {
    Global = 0,
    DataImage = 1,
    DataText = 2,
    CtxImage = 3,
    CtxText = 4,
};

inline const char* group_name(LayerGroup g) {
    switch (g) {
        case LayerGroup::Global: return "global";
        case LayerGroup::DataImage: return "data_image";
        case LayerGroup::DataText: return "data_text";
        case LayerGroup::CtxImage: return "ctx_image";
        case LayerGroup::CtxText: return "ctx_text";
    }
    return "?";
}

inline LayerGroup group_from_name(const std::string& name) {
    for (auto g : {LayerGroup::Global, LayerGroup::DataImage, LayerGroup::DataText,
                   LayerGroup::CtxImage, LayerGroup::CtxText}) {
        if (name == group_name(g)) return g;
    }
    throw ConfigError("unknown layer group: " + name);
}

inline LayerGroup data_group(Modality m) {
    return m == Modality::Image ? LayerGroup::DataImage : LayerGroup::DataText;
}

inline LayerGroup ctx_group(Modality m) {
    return m == Modality::Image ? LayerGroup::CtxImage : LayerGroup::CtxText;
}

}  // namespace vd
