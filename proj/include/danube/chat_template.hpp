#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "danube/tokenizer.hpp"

namespace danube {

struct ChatMessage {
    std::string role; // system | user | assistant
    std::string content;
};

enum class TemplateSource { checkpoint, user_config };

/// A run of rendered text. Template literals may contain special-token
/// strings (e.g. "</s>"); user content never becomes special tokens.
struct TextSegment {
    std::string text;
    bool literal = false;
};

struct RenderOptions {
    bool add_generation_prompt = true;
    std::string bos_token;
    std::string eos_token;
};

namespace jinja {
struct Node;
}

/// Chat template in the Jinja dialect used by tokenizer.chat_template.
///
/// Supported: {{ }}, {% if/elif/else %}, {% for %} (with loop.index0,
/// loop.first, loop.last, ...), {% set %} including namespace() attributes,
/// {# #}, whitespace control (-), trim_blocks/lstrip_blocks, the usual
/// operators, string methods (strip, startswith, ...), filters (trim,
/// length, upper, lower, default, join, first, last), tests (defined, none,
/// string, ...), and raise_exception().
class ChatTemplate {
public:
    /// Throws a config error on syntax errors.
    static ChatTemplate parse(std::string_view source, TemplateSource origin);

    TemplateSource origin() const { return origin_; }
    const std::string & source() const { return source_; }

    std::vector<TextSegment> render(std::span<const ChatMessage> messages, const RenderOptions & options) const;
    std::string render_text(std::span<const ChatMessage> messages, const RenderOptions & options) const;

private:
    std::string source_;
    TemplateSource origin_ = TemplateSource::user_config;
    std::shared_ptr<const jinja::Node> root_;
};

/// The checkpoint's template when present, otherwise the user's; neither is
/// a configuration error.
ChatTemplate select_template(const std::optional<std::string> & checkpoint_template,
                             const std::optional<std::string> & user_template);

/// Renders and tokenizes a conversation; an empty one yields the template
/// prologue. Roles must be system, user or assistant. BOS is prepended when
/// the vocabulary asks for it and the template did not already emit it.
std::vector<int32_t> render_chat(std::span<const ChatMessage> turns, const ChatTemplate & tmpl,
                                 const Tokenizer & tokenizer, bool add_generation_prompt = true);

} // namespace danube
