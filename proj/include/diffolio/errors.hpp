#pragma once

#include <stdexcept>
#include <string>

namespace diffolio {

// Exit codes surfaced by the command-line front end.
enum class ExitCode : int { ok = 0, config_or_data = 1, usage = 2, numeric = 3 };

class Error : public std::runtime_error {
public:
    Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ExitCode::config_or_data, what) {}
};

class ConfigError : public Error {
public:
    ConfigError(const std::string& field, const std::string& what)
        : Error(ExitCode::config_or_data, field + ": " + what), field_(field) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ExitCode::numeric, what) {}
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(ExitCode::usage, what) {}
};

}  // namespace diffolio
