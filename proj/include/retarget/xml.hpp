#pragma once

#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "retarget/errors.hpp"

namespace retarget::xml {

// Minimal DOM for the URDF subset: elements, attributes and text. Comments,
// processing instructions, DOCTYPE and CDATA are accepted and dropped.
struct Element {
  std::string name;
  std::vector<std::pair<std::string, std::string>> attributes;
  std::vector<Element> children;
  std::string text;
  int line = 0;
  int column = 0;

  std::optional<std::string> attribute(std::string_view key) const {
    for (const auto& [k, v] : attributes)
      if (k == key) return v;
    return std::nullopt;
  }

  const Element* child(std::string_view tag) const {
    for (const auto& c : children)
      if (c.name == tag) return &c;
    return nullptr;
  }
};

class Parser {
 public:
  explicit Parser(std::string_view text) : s_(text) {}

  Element parse_document() {
    skip_misc();
    if (eof()) fail("document has no root element");
    Element root = parse_element();
    skip_misc();
    if (!eof()) fail("unexpected content after the root element");
    return root;
  }

 private:
  bool eof() const { return pos_ >= s_.size(); }
  char peek(std::size_t off = 0) const {
    return pos_ + off < s_.size() ? s_[pos_ + off] : '\0';
  }
  bool starts_with(std::string_view p) const { return s_.substr(pos_, p.size()) == p; }

  void advance(std::size_t n = 1) {
    for (std::size_t i = 0; i < n && pos_ < s_.size(); ++i, ++pos_) {
      if (s_[pos_] == '\n') {
        ++line_;
        col_ = 1;
      } else {
        ++col_;
      }
    }
  }

  [[noreturn]] void fail(const std::string& msg) const { throw ParseError(msg, line_, col_); }

  static bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }
  static bool is_name_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.' ||
           c == ':';
  }

  void skip_space() {
    while (!eof() && is_space(peek())) advance();
  }

  void skip_until(std::string_view terminator, const char* what) {
    while (!eof() && !starts_with(terminator)) advance();
    if (eof()) fail(std::string("unterminated ") + what);
    advance(terminator.size());
  }

  // Whitespace, comments, processing instructions and DOCTYPE.
  void skip_misc() {
    for (;;) {
      skip_space();
      if (starts_with("<!--")) {
        advance(4);
        skip_until("-->", "comment");
      } else if (starts_with("<?")) {
        advance(2);
        skip_until("?>", "processing instruction");
      } else if (starts_with("<!DOCTYPE")) {
        advance(9);
        skip_until(">", "DOCTYPE");
      } else {
        return;
      }
    }
  }

  std::string parse_name() {
    const std::size_t start = pos_;
    while (!eof() && is_name_char(peek())) advance();
    if (pos_ == start) fail("expected a name");
    return std::string(s_.substr(start, pos_ - start));
  }

  std::string decode(std::string_view raw) const {
    std::string out;
    out.reserve(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (raw[i] != '&') {
        out.push_back(raw[i]);
        continue;
      }
      const auto semi = raw.find(';', i);
      if (semi == std::string_view::npos) fail("unterminated entity reference");
      const auto ent = raw.substr(i + 1, semi - i - 1);
      if (ent == "amp") out.push_back('&');
      else if (ent == "lt") out.push_back('<');
      else if (ent == "gt") out.push_back('>');
      else if (ent == "quot") out.push_back('"');
      else if (ent == "apos") out.push_back('\'');
      else if (!ent.empty() && ent[0] == '#') {
        const bool hex = ent.size() > 1 && (ent[1] == 'x' || ent[1] == 'X');
        const auto digits = std::string(ent.substr(hex ? 2 : 1));
        const long code = std::strtol(digits.c_str(), nullptr, hex ? 16 : 10);
        if (code <= 0 || code > 127) fail("unsupported character reference");
        out.push_back(static_cast<char>(code));
      } else {
        fail("unknown entity '&" + std::string(ent) + ";'");
      }
      i = semi;
    }
    return out;
  }

  Element parse_element() {
    if (peek() != '<') fail("expected '<'");
    Element el;
    el.line = line_;
    el.column = col_;
    advance();
    el.name = parse_name();
    for (;;) {
      skip_space();
      if (eof()) fail("unterminated start tag <" + el.name + ">");
      if (starts_with("/>")) {
        advance(2);
        return el;
      }
      if (peek() == '>') {
        advance();
        break;
      }
      std::string key = parse_name();
      skip_space();
      if (peek() != '=') fail("expected '=' after attribute '" + key + "'");
      advance();
      skip_space();
      const char quote = peek();
      if (quote != '"' && quote != '\'') fail("attribute value must be quoted");
      advance();
      const std::size_t start = pos_;
      while (!eof() && peek() != quote) {
        if (peek() == '<') fail("'<' inside attribute value");
        advance();
      }
      if (eof()) fail("unterminated attribute value");
      std::string value = decode(s_.substr(start, pos_ - start));
      advance();
      for (const auto& [k, v] : el.attributes)
        if (k == key) fail("duplicate attribute '" + key + "'");
      el.attributes.emplace_back(std::move(key), std::move(value));
    }

    // Content until the matching end tag.
    for (;;) {
      if (eof()) fail("missing end tag </" + el.name + ">");
      if (starts_with("</")) {
        advance(2);
        const std::string closing = parse_name();
        if (closing != el.name)
          fail("mismatched end tag </" + closing + ">, expected </" + el.name + ">");
        skip_space();
        if (peek() != '>') fail("expected '>' in end tag");
        advance();
        return el;
      }
      if (starts_with("<!--")) {
        advance(4);
        skip_until("-->", "comment");
      } else if (starts_with("<![CDATA[")) {
        advance(9);
        const std::size_t start = pos_;
        skip_until("]]>", "CDATA section");
        el.text += std::string(s_.substr(start, pos_ - start - 3));
      } else if (starts_with("<?")) {
        advance(2);
        skip_until("?>", "processing instruction");
      } else if (peek() == '<') {
        el.children.push_back(parse_element());
      } else {
        const std::size_t start = pos_;
        while (!eof() && peek() != '<') advance();
        el.text += decode(s_.substr(start, pos_ - start));
      }
    }
  }

  std::string_view s_;
  std::size_t pos_ = 0;
  int line_ = 1;
  int col_ = 1;
};

inline Element parse(std::string_view text) { return Parser(text).parse_document(); }

inline std::string escape(std::string_view v) {
  std::string out;
  for (char c : v) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

}  // namespace retarget::xml
