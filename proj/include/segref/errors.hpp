#pragma once

#include <stdexcept>
#include <string>

namespace segref {

// All engine errors derive from Error and carry a short machine-readable
// kind ("bounds", "protocol", ...) used by the CLI's stderr error JSON.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const { return kind_; }

private:
    std::string kind_;
};

class BoundsError : public Error {
public:
    explicit BoundsError(const std::string& msg) : Error("bounds", msg) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error("shape", msg) {}
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& msg) : Error("validation", msg) {}
};

class IngestError : public Error {
public:
    explicit IngestError(const std::string& msg) : Error("ingest", msg) {}
};

class EmptyCorpusError : public Error {
public:
    explicit EmptyCorpusError(const std::string& msg) : Error("empty_corpus", msg) {}
};

class EmptyResultError : public Error {
public:
    explicit EmptyResultError(const std::string& msg) : Error("empty_result", msg) {}
};

// Protocol errors keep the raw model output so run traces can log it.
class ProtocolError : public Error {
public:
    explicit ProtocolError(const std::string& msg, std::string raw_text = "")
        : Error("protocol", msg), raw_text_(std::move(raw_text)) {}

    const std::string& raw_text() const { return raw_text_; }

private:
    std::string raw_text_;
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& msg) : Error("format", msg) {}
};

class BackendError : public Error {
public:
    explicit BackendError(const std::string& msg) : Error("backend", msg) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error("io", msg) {}
};

}  // namespace segref
