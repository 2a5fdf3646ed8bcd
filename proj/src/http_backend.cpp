#include <chrono>
#include <cstdlib>

#include <httplib.h>
#include <json.hpp>

#include "segref/agents.hpp"

namespace segref {

using nlohmann::json;
using nlohmann::ordered_json;

BackendResponse HttpBackend::complete(const BackendRequest& request) {
    ordered_json body;
    body["role"] = request.role.role;
    body["system"] = request.role.system_template;
    auto parts = ordered_json::array();
    for (const auto& part : request.parts) {
        ordered_json p;
        if (part.kind == Part::Kind::Text) {
            p["text"] = part.text;
        } else {
            p["image_ref"] = part.image.wire_ref();
        }
        parts.push_back(std::move(p));
    }
    body["parts"] = std::move(parts);
    body["prior_context"] = request.prior_context;
    body["temperature"] = request.role.temperature;
    body["thinking_mode"] = request.role.thinking_mode;
    body["response_schema"] = request.role.response_schema;

    httplib::Client client(config_.base_url);
    client.set_connection_timeout(0, config_.timeout_ms * 1000);
    client.set_read_timeout(config_.timeout_ms / 1000, (config_.timeout_ms % 1000) * 1000);
    httplib::Headers headers;
    if (!config_.credential_env.empty()) {
        if (const char* key = std::getenv(config_.credential_env.c_str())) {
            headers.emplace("Authorization", std::string("Bearer ") + key);
        }
    }

    auto start = std::chrono::steady_clock::now();
    httplib::Result result =
        client.Post(config_.path, headers, body.dump(), "application/json");
    auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::steady_clock::now() - start)
                       .count();
    if (!result) {
        throw BackendError("http request failed: " + httplib::to_string(result.error()));
    }
    if (result->status != 200) {
        throw BackendError("backend returned status " + std::to_string(result->status));
    }
    json doc = json::parse(result->body, nullptr, false);
    if (doc.is_discarded() || !doc.is_object() || !doc.contains("text")) {
        throw BackendError("backend response is not the expected JSON shape");
    }
    BackendResponse response;
    response.text = doc["text"].get<std::string>();
    if (doc.contains("usage") && doc["usage"].is_object()) {
        response.input_tokens = doc["usage"].value("input_tokens", 0L);
        response.output_tokens = doc["usage"].value("output_tokens", 0L);
    }
    response.latency_ms = static_cast<long>(elapsed);
    return response;
}

}  // namespace segref
