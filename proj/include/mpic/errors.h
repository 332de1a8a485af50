#pragma once

#include <stdexcept>
#include <string>

namespace mpic {

// Error taxonomy. Callers that need to distinguish failure classes catch the
// concrete type; everything derives from mpic::error.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad model/store configuration (dimension mismatch, invalid budgets, ...).
struct config_error : error {
    using error::error;
};

// Invalid argument to an operation (out-of-vocab id, dim mismatch, empty input).
struct validation_error : error {
    using error::error;
};

// Operation applied to an object in the wrong state (decode position mismatch).
struct state_error : error {
    using error::error;
};

// Cache assembly failure: token count or fingerprint mismatch between a
// fetched entry and the prompt segment it should fill.
struct link_error : error {
    using error::error;
};

// selective_prefill precondition violations (dummy slot or final token not
// covered by the selection mask).
struct contract_error : error {
    using error::error;
};

// Malformed serialized container (bad magic, version, truncated stream, CRC).
struct format_error : error {
    using error::error;
};

// Stored payload failed an integrity check; callers treat the key as a miss.
struct integrity_error : error {
    using error::error;
};

struct io_error : error {
    using error::error;
};

struct not_found_error : error {
    using error::error;
};

// Malformed or unresolvable client request.
struct request_error : error {
    using error::error;
};

} // namespace mpic
