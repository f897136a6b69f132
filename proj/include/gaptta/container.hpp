#pragma once

#include <gaptta/numerics.hpp>

#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace gaptta {

/// Versioned text container shared by checkpoints and dataset caches.
///
///     GAPTTA-<KIND> <version>
///     meta <key> <value...>
///     array <name> <rows> <cols>
///     <cols values>          (one line per row, %.17g)
///     end
///
/// Values are written with 17 significant digits so every double round-trips
/// exactly.
struct Container {
    struct Array {
        std::string name;
        Matrix values;
    };

    std::string kind;
    int version = 0;
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<Array> arrays;

    void set_meta(std::string key, std::string value);
    void add_array(std::string name, Matrix values);
    void add_array(std::string name, const Vector& values);

    const std::string& meta_value(std::string_view key) const;
    const Matrix& array(std::string_view name) const;
    Vector vector(std::string_view name) const;
};

void write_container(std::ostream& out, const Container& container);

/// Throws Format on a foreign magic line, Version on a version mismatch,
/// Truncated when the stream ends early, Shape when a row is ragged.
Container read_container(std::istream& in, std::string_view expected_kind, int expected_version);

std::string format_double(double value);

}  // namespace gaptta
