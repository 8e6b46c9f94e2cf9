// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Error taxonomy shared by every module. Each error carries a short kind
// string so the CLI can print `ERROR kind=... detail=...` without RTTI games.

#pragma once

#include <stdexcept>
#include <string>

namespace aligndesk {

class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& detail)
        : std::runtime_error(detail), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define ALIGNDESK_DEFINE_ERROR(Name)                                          \
    class Name : public Error {                                               \
    public:                                                                   \
        explicit Name(const std::string& detail) : Error(#Name, detail) {}    \
    }

ALIGNDESK_DEFINE_ERROR(ShapeError);
ALIGNDESK_DEFINE_ERROR(ContractError);
ALIGNDESK_DEFINE_ERROR(NumericError);
ALIGNDESK_DEFINE_ERROR(DomainError);
ALIGNDESK_DEFINE_ERROR(ConfigError);
ALIGNDESK_DEFINE_ERROR(FormatError);
ALIGNDESK_DEFINE_ERROR(IOError);

#undef ALIGNDESK_DEFINE_ERROR

}  // namespace aligndesk
