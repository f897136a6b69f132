#include <gaptta/container.hpp>

#include <gaptta/error.hpp>

#include <charconv>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

namespace gaptta {

std::string format_double(double value) {
    char buffer[40];
    std::snprintf(buffer, sizeof buffer, "%.17g", value);
    return buffer;
}

void Container::set_meta(std::string key, std::string value) {
    for (auto& [k, v] : meta) {
        if (k == key) {
            v = std::move(value);
            return;
        }
    }
    meta.emplace_back(std::move(key), std::move(value));
}

void Container::add_array(std::string name, Matrix values) {
    arrays.push_back({std::move(name), std::move(values)});
}

void Container::add_array(std::string name, const Vector& values) {
    Matrix m(1, values.size());
    std::copy(values.begin(), values.end(), m.values().begin());
    add_array(std::move(name), std::move(m));
}

const std::string& Container::meta_value(std::string_view key) const {
    for (const auto& [k, v] : meta) {
        if (k == key) return v;
    }
    fail(ErrorKind::Format, "container: missing meta field '" + std::string(key) + "'");
}

const Matrix& Container::array(std::string_view name) const {
    for (const auto& a : arrays) {
        if (a.name == name) return a.values;
    }
    fail(ErrorKind::Format, "container: missing array '" + std::string(name) + "'");
}

Vector Container::vector(std::string_view name) const {
    const Matrix& m = array(name);
    return Vector(m.values().begin(), m.values().end());
}

void write_container(std::ostream& out, const Container& container) {
    out << "GAPTTA-" << container.kind << ' ' << container.version << '\n';
    for (const auto& [k, v] : container.meta) out << "meta " << k << ' ' << v << '\n';
    for (const auto& a : container.arrays) {
        out << "array " << a.name << ' ' << a.values.rows() << ' ' << a.values.cols() << '\n';
        for (std::size_t r = 0; r < a.values.rows(); ++r) {
            const auto row = a.values.row(r);
            for (std::size_t c = 0; c < row.size(); ++c) {
                if (c) out << ' ';
                out << format_double(row[c]);
            }
            out << '\n';
        }
    }
    out << "end\n";
}

namespace {

double parse_number(std::string_view token, std::size_t line) {
    double value = 0.0;
    const auto* first = token.data();
    const auto* last = token.data() + token.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last) {
        fail(ErrorKind::Format, "container line " + std::to_string(line) + ": bad number '" +
                                    std::string(token) + "'");
    }
    return value;
}

}  // namespace

Container read_container(std::istream& in, std::string_view expected_kind, int expected_version) {
    Container c;
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) fail(ErrorKind::Truncated, "container: empty input");
    ++line_no;
    {
        std::istringstream head(line);
        std::string magic;
        int version = 0;
        head >> magic >> version;
        if (magic != "GAPTTA-" + std::string(expected_kind)) {
            fail(ErrorKind::Format, "container: bad magic '" + magic + "', expected GAPTTA-" +
                                        std::string(expected_kind));
        }
        if (!head) fail(ErrorKind::Format, "container: missing version on header line");
        if (version != expected_version) {
            fail(ErrorKind::Version, "container: format version " + std::to_string(version) +
                                         " unsupported (expected " +
                                         std::to_string(expected_version) + ")");
        }
        c.kind = std::string(expected_kind);
        c.version = version;
    }

    // A line without its newline is the last one of a cut-off file; defects
    // found there are reported as truncation.
    auto defect = [&](ErrorKind kind, const std::string& message) {
        fail(in.eof() ? ErrorKind::Truncated : kind, message);
    };

    bool ended = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string tag;
        fields >> tag;
        if (tag == "end") {
            ended = true;
            break;
        }
        if (tag == "meta") {
            std::string key;
            fields >> key;
            std::string value;
            std::getline(fields >> std::ws, value);
            c.meta.emplace_back(std::move(key), std::move(value));
        } else if (tag == "array") {
            std::string name;
            long long rows = -1;
            long long cols = -1;
            fields >> name >> rows >> cols;
            if (!fields || rows < 0 || cols < 0) {
                defect(ErrorKind::Format, "container line " + std::to_string(line_no) + ": bad array header");
            }
            Matrix m(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols));
            for (std::size_t r = 0; r < m.rows(); ++r) {
                if (!std::getline(in, line)) {
                    fail(ErrorKind::Truncated, "container: array '" + name + "' truncated at row " +
                                                   std::to_string(r));
                }
                ++line_no;
                std::istringstream values(line);
                std::string token;
                std::size_t col = 0;
                while (values >> token) {
                    if (col >= m.cols()) {
                        defect(ErrorKind::Shape, "container line " + std::to_string(line_no) +
                                                   ": too many values for array '" + name + "'");
                    }
                    try {
                        m(r, col++) = parse_number(token, line_no);
                    } catch (const Error& e) {
                        defect(e.kind(), e.what());
                    }
                }
                if (col != m.cols()) {
                    defect(ErrorKind::Shape, "container line " + std::to_string(line_no) +
                                                   ": array '" + name + "' row has " +
                                                   std::to_string(col) + " of " +
                                                   std::to_string(m.cols()) + " values");
                }
            }
            c.arrays.push_back({std::move(name), std::move(m)});
        } else {
            defect(ErrorKind::Format, "container line " + std::to_string(line_no) + ": unknown record '" + tag + "'");
        }
    }
    if (!ended) fail(ErrorKind::Truncated, "container: missing end record");
    return c;
}

}  // namespace gaptta
