#pragma once

#include <array>
#include <string>

#include "vd/types.hpp"

namespace vd {

// Discrete attribute vocabulary of the toy paired dataset: 3x3x3 tuples.
enum class ShapeKind : int { Circle = 0, Square = 1, Triangle = 2 };
enum class ColorKind : int { Red = 0, Green = 1, Blue = 2 };
enum class PosKind : int { Left = 0, Center = 1, Right = 2 };

struct Attrs {
    ShapeKind shape = ShapeKind::Circle;
    ColorKind color = ColorKind::Red;
    PosKind pos = PosKind::Center;

    bool operator==(const Attrs&) const = default;

    int index() const {
        return static_cast<int>(shape) * 9 + static_cast<int>(color) * 3 + static_cast<int>(pos);
    }
    static Attrs from_index(int i);
};

inline constexpr int kNumAttrTuples = 27;

const char* shape_kind_name(ShapeKind s);
const char* color_kind_name(ColorKind c);
const char* pos_kind_name(PosKind p);

ShapeKind shape_kind_from_name(const std::string& s);
ColorKind color_kind_from_name(const std::string& s);
PosKind pos_kind_from_name(const std::string& s);

// Parses "circle,red,left" (shape,color,position).
Attrs attrs_from_string(const std::string& s);
std::string attrs_to_string(const Attrs& a);

// "a red circle on the left" style clean caption.
std::string attrs_caption(const Attrs& a);

// RGB palette entries in [0,1].
std::array<double, 3> color_rgb(ColorKind c);

}  // namespace vd
