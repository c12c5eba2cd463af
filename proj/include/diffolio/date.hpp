#pragma once

#include <chrono>
#include <compare>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>

namespace diffolio {

// Calendar date stored as days since 1970-01-01.
class Date {
public:
    constexpr Date() = default;
    constexpr explicit Date(int days_since_epoch) : days_(days_since_epoch) {}

    static std::optional<Date> parse(std::string_view text) {
        // Accepts YYYY-MM-DD and YYYYMMDD.
        int y = 0, m = 0, d = 0;
        std::string s(text);
        if (s.size() == 10 && s[4] == '-' && s[7] == '-') {
            if (std::sscanf(s.c_str(), "%4d-%2d-%2d", &y, &m, &d) != 3) return std::nullopt;
        } else if (s.size() == 8 && s.find_first_not_of("0123456789") == std::string::npos) {
            y = std::stoi(s.substr(0, 4));
            m = std::stoi(s.substr(4, 2));
            d = std::stoi(s.substr(6, 2));
        } else {
            return std::nullopt;
        }
        const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{static_cast<unsigned>(m)},
                                              std::chrono::day{static_cast<unsigned>(d)}};
        if (!ymd.ok()) return std::nullopt;
        return Date(std::chrono::sys_days{ymd}.time_since_epoch().count());
    }

    static Date from_ymd(int y, unsigned m, unsigned d) {
        const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
        return Date(std::chrono::sys_days{ymd}.time_since_epoch().count());
    }

    std::string iso() const {
        const std::chrono::year_month_day ymd{std::chrono::sys_days{std::chrono::days{days_}}};
        char buf[16];
        std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                      static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
        return buf;
    }

    int year() const {
        const std::chrono::year_month_day ymd{std::chrono::sys_days{std::chrono::days{days_}}};
        return static_cast<int>(ymd.year());
    }

    std::chrono::weekday weekday() const { return std::chrono::weekday{std::chrono::sys_days{std::chrono::days{days_}}}; }

    constexpr int days() const { return days_; }
    constexpr Date next_day() const { return Date(days_ + 1); }

    constexpr auto operator<=>(const Date&) const = default;

private:
    int days_ = 0;
};

// Inclusive date interval.
struct DateRange {
    Date first;
    Date last;

    bool contains(Date d) const { return first <= d && d <= last; }
    bool empty_interval() const { return last < first; }
};

}  // namespace diffolio
