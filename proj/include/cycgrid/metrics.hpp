#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

namespace cycgrid {

// Append-only JSONL sink. Every record must carry phase/step/seed; steps are
// strictly increasing within a phase (caller contract, checked in tests).
class MetricsWriter {
public:
    explicit MetricsWriter(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot open metrics file: " + path);
    }

    void write(const nlohmann::json& record) {
        out_ << record.dump() << '\n';
        out_.flush();  // records stay observable during long runs
        if (!out_) throw std::runtime_error("metrics write failed");
    }

    void flush() { out_.flush(); }

private:
    std::ofstream out_;
};

}  // namespace cycgrid
