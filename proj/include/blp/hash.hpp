#pragma once

#include <algorithm>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>

#include "blp/errors.hpp"

namespace blp {

inline std::string sha1_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1) throw Error("sha1 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

/// Object id git would give the content as a blob.
inline std::string git_blob_hash(std::string_view content) {
  std::string buf = "blob " + std::to_string(content.size());
  buf.push_back('\0');
  buf.append(content);
  return sha1_hex(buf);
}

/// Hash over a set of named inputs: a sorted "<blob hash> <name>" listing,
/// itself hashed as a blob.
inline std::string inputs_hash(std::vector<std::pair<std::string, std::string>> named_contents) {
  std::vector<std::string> lines;
  for (const auto& [name, content] : named_contents) lines.push_back(git_blob_hash(content) + " " + name + "\n");
  std::sort(lines.begin(), lines.end());
  std::string listing;
  for (const auto& l : lines) listing += l;
  return git_blob_hash(listing);
}

}  // namespace blp
