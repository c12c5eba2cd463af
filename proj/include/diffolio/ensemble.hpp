#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "diffolio/csv.hpp"
#include "diffolio/date.hpp"
#include "diffolio/errors.hpp"
#include "diffolio/tensor.hpp"

namespace diffolio {

/// K sampled next-day excess return vectors for one forecast date.
struct ForecastEnsemble {
    Date date;
    Matrix samples;  // K × N

    Eigen::Index size() const { return samples.rows(); }
    Vector mean() const { return samples.colwise().mean().transpose(); }

    void validate() const {
        if (samples.rows() < 1) throw DataError("ensemble " + date.iso() + " has no samples");
        if (!samples.allFinite()) throw NumericError("ensemble " + date.iso() + " has non-finite samples");
    }
};

// ---- CSV form ----------------------------------------------------------------
//
//   # diffolio-ensemble csv v1
//   <date>,<K>,<N>
//   K lines of N comma-separated returns
//   ... next record

inline constexpr const char* ensemble_csv_header = "# diffolio-ensemble csv v1";

inline void write_ensembles_csv(const std::string& path, const std::vector<ForecastEnsemble>& ens) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << ensemble_csv_header << "\n";
    for (const auto& e : ens) {
        out << e.date.iso() << "," << e.samples.rows() << "," << e.samples.cols() << "\n";
        for (Eigen::Index k = 0; k < e.samples.rows(); ++k) {
            for (Eigen::Index i = 0; i < e.samples.cols(); ++i) {
                if (i) out << ",";
                out << csv::fmt(e.samples(k, i));
            }
            out << "\n";
        }
    }
}

inline std::vector<ForecastEnsemble> read_ensembles_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line) || csv::trim(line) != ensemble_csv_header) {
        throw DataError(path + ": missing ensemble version header");
    }
    std::vector<ForecastEnsemble> out;
    while (std::getline(in, line)) {
        ++lineno;
        if (csv::trim(line).empty()) continue;
        const auto head = csv::split_line(line);
        if (head.size() != 3) throw DataError(path + ":" + std::to_string(lineno) + ": expected date,K,N");
        const auto d = Date::parse(head[0]);
        if (!d) throw DataError(path + ":" + std::to_string(lineno) + ": bad date");
        const long k = std::stol(head[1]);
        const long n = std::stol(head[2]);
        if (k < 1 || n < 1) throw DataError(path + ":" + std::to_string(lineno) + ": bad K or N");
        ForecastEnsemble e{*d, Matrix(k, n)};
        for (long r = 0; r < k; ++r) {
            if (!std::getline(in, line)) throw DataError(path + ": truncated record for " + head[0]);
            ++lineno;
            const auto cells = csv::split_line(line);
            if (static_cast<long>(cells.size()) != n) {
                throw DataError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(n) + " values");
            }
            for (long i = 0; i < n; ++i) e.samples(r, i) = csv::parse_double(cells[static_cast<std::size_t>(i)], path, lineno);
        }
        out.push_back(std::move(e));
    }
    return out;
}

// ---- binary form ---------------------------------------------------------------
//
// Little-endian:
//   char[8] "DFENSv01"
//   u64     record count
//   per record: i32 days since 1970-01-01, u32 K, u32 N, f64[K·N] row-major samples

inline void write_ensembles_binary(const std::string& path, const std::vector<ForecastEnsemble>& ens) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out.write("DFENSv01", 8);
    const std::uint64_t count = ens.size();
    out.write(reinterpret_cast<const char*>(&count), sizeof count);
    for (const auto& e : ens) {
        const std::int32_t days = e.date.days();
        const std::uint32_t k = static_cast<std::uint32_t>(e.samples.rows());
        const std::uint32_t n = static_cast<std::uint32_t>(e.samples.cols());
        out.write(reinterpret_cast<const char*>(&days), sizeof days);
        out.write(reinterpret_cast<const char*>(&k), sizeof k);
        out.write(reinterpret_cast<const char*>(&n), sizeof n);
        const RowMatrix rm = e.samples;
        out.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(sizeof(double) * rm.size()));
    }
}

inline std::vector<ForecastEnsemble> read_ensembles_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    char magic[8];
    std::uint64_t count = 0;
    if (!in.read(magic, 8) || std::memcmp(magic, "DFENSv01", 8) != 0) throw DataError(path + ": bad ensemble magic");
    if (!in.read(reinterpret_cast<char*>(&count), sizeof count)) throw DataError(path + ": truncated");
    std::vector<ForecastEnsemble> out;
    for (std::uint64_t r = 0; r < count; ++r) {
        std::int32_t days = 0;
        std::uint32_t k = 0, n = 0;
        in.read(reinterpret_cast<char*>(&days), sizeof days);
        in.read(reinterpret_cast<char*>(&k), sizeof k);
        in.read(reinterpret_cast<char*>(&n), sizeof n);
        RowMatrix rm(k, n);
        in.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(sizeof(double) * rm.size()));
        if (!in) throw DataError(path + ": truncated record");
        out.push_back(ForecastEnsemble{Date(days), Matrix(rm)});
    }
    return out;
}

inline std::vector<ForecastEnsemble> read_ensembles(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    char magic[8] = {};
    probe.read(magic, 8);
    if (probe && std::memcmp(magic, "DFENSv01", 8) == 0) return read_ensembles_binary(path);
    return read_ensembles_csv(path);
}

}  // namespace diffolio
