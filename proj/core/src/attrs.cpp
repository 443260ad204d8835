#include "vd/attrs.hpp"

#include <sstream>

namespace vd {

Attrs Attrs::from_index(int i) {
    if (i < 0 || i >= kNumAttrTuples) throw ConfigError("attr index out of range");
    Attrs a;
    a.shape = static_cast<ShapeKind>(i / 9);
    a.color = static_cast<ColorKind>((i / 3) % 3);
    a.pos = static_cast<PosKind>(i % 3);
    return a;
}

const char* shape_kind_name(ShapeKind s) {
    switch (s) {
        case ShapeKind::Circle: return "circle";
        case ShapeKind::Square: return "square";
        case ShapeKind::Triangle: return "triangle";
    }
    return "?";
}

const char* color_kind_name(ColorKind c) {
    switch (c) {
        case ColorKind::Red: return "red";
        case ColorKind::Green: return "green";
        case ColorKind::Blue: return "blue";
    }
    return "?";
}

const char* pos_kind_name(PosKind p) {
    switch (p) {
        case PosKind::Left: return "left";
        case PosKind::Center: return "center";
        case PosKind::Right: return "right";
    }
    return "?";
}

ShapeKind shape_kind_from_name(const std::string& s) {
    for (auto k : {ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle})
        if (s == shape_kind_name(k)) return k;
    throw ConfigError("unknown shape: " + s);
}

ColorKind color_kind_from_name(const std::string& s) {
    for (auto k : {ColorKind::Red, ColorKind::Green, ColorKind::Blue})
        if (s == color_kind_name(k)) return k;
    throw ConfigError("unknown color: " + s);
}

PosKind pos_kind_from_name(const std::string& s) {
    for (auto k : {PosKind::Left, PosKind::Center, PosKind::Right})
        if (s == pos_kind_name(k)) return k;
    throw ConfigError("unknown position: " + s);
}

Attrs attrs_from_string(const std::string& s) {
    std::istringstream in(s);
    std::string shape, color, pos;
    if (!std::getline(in, shape, ',') || !std::getline(in, color, ',') || !std::getline(in, pos))
        throw ConfigError("attrs must be shape,color,position, got: " + s);
    return Attrs{shape_kind_from_name(shape), color_kind_from_name(color),
                 pos_kind_from_name(pos)};
}

std::string attrs_to_string(const Attrs& a) {
    std::string s = shape_kind_name(a.shape);
    s += ",";
    s += color_kind_name(a.color);
    s += ",";
    s += pos_kind_name(a.pos);
    return s;
}

std::string attrs_caption(const Attrs& a) {
    std::string where;
    switch (a.pos) {
        case PosKind::Left: where = "on the left"; break;
        case PosKind::Center: where = "in the center"; break;
        case PosKind::Right: where = "on the right"; break;
    }
    return std::string("a ") + color_kind_name(a.color) + " " + shape_kind_name(a.shape) + " " +
           where;
}

std::array<double, 3> color_rgb(ColorKind c) {
    switch (c) {
        case ColorKind::Red: return {0.90, 0.10, 0.10};
        case ColorKind::Green: return {0.10, 0.85, 0.15};
        case ColorKind::Blue: return {0.15, 0.25, 0.95};
    }
    return {0, 0, 0};
}

}  // namespace vd
