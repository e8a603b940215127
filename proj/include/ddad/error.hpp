#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ddad {

/// Base of every error thrown by the library. `module()` names the subsystem
/// that raised it so front ends can print categorized messages.
class Error : public std::runtime_error {
public:
    Error(std::string_view module, const std::string& what)
        : std::runtime_error(what), module_(module) {}

    std::string_view module() const noexcept { return module_; }

private:
    std::string_view module_;
};

#define DDAD_DEFINE_ERROR(Name, Module)                                        \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what) : Error(Module, what) {}        \
    };

DDAD_DEFINE_ERROR(ShapeError, "tensor")
DDAD_DEFINE_ERROR(DomainError, "tensor")
DDAD_DEFINE_ERROR(ContractError, "tensor")
DDAD_DEFINE_ERROR(ConfigError, "config")
DDAD_DEFINE_ERROR(FormatError, "checkpoint")
DDAD_DEFINE_ERROR(NumericalError, "trainer")
DDAD_DEFINE_ERROR(IngestionError, "data")
DDAD_DEFINE_ERROR(EvaluationError, "eval")

#undef DDAD_DEFINE_ERROR

} // namespace ddad
