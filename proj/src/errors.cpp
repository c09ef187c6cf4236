#include "wsclip/errors.hpp"

#include <typeinfo>

namespace wsclip {

const char* error_category(const std::exception& e) {
    if (dynamic_cast<const DimensionError*>(&e)) return "dimension";
    if (dynamic_cast<const ConfigError*>(&e)) return "config";
    if (dynamic_cast<const ContractError*>(&e)) return "contract";
    if (dynamic_cast<const NumericError*>(&e)) return "numeric";
    if (dynamic_cast<const InputError*>(&e)) return "input";
    if (dynamic_cast<const FormatError*>(&e)) return "format";
    if (dynamic_cast<const IntegrityError*>(&e)) return "integrity";
    if (dynamic_cast<const CheckpointError*>(&e)) return "checkpoint";
    return "internal";
}

}  // namespace wsclip
