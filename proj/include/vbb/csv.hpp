#pragma once

// Byte-reproducible CSV output: header row, '.' decimal separator, floats at
// 17 significant digits via to_chars (locale independent).

#include <charconv>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "vbb/tensor.hpp"

namespace vbb {

inline std::string csv_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string quoted = "\"";
    for (char c : s) {
        if (c == '"') quoted += '"';
        quoted += c;
    }
    quoted += '"';
    return quoted;
}

class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header) : os_(path) {
        if (!os_) throw IoError("csv: cannot open " + path + " for writing");
        write_row_strings(header);
    }

    void write_row_strings(const std::vector<std::string>& fields) {
        for (size_t i = 0; i < fields.size(); ++i) {
            if (i) os_ << ',';
            os_ << csv_field(fields[i]);
        }
        os_ << '\n';
    }

    class Row {
    public:
        explicit Row(CsvWriter& w) : w_(w) {}
        Row& add(const std::string& s) {
            fields_.push_back(s);
            return *this;
        }
        Row& add(int64_t v) { return add(std::to_string(v)); }
        Row& add(uint64_t v) { return add(std::to_string(v)); }
        Row& add(double v) { return add(csv_double(v)); }
        ~Row() { w_.write_row_strings(fields_); }

    private:
        CsvWriter& w_;
        std::vector<std::string> fields_;
    };

    Row row() { return Row(*this); }

private:
    std::ofstream os_;
};

}  // namespace vbb
