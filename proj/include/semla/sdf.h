//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "semla/molecule.h"

namespace semla {
// Supported subset of the V2000 connection table: three header lines, the
// counts line, atom block, bond block (types 1-4), "M  CHG" and "M  END"
// property lines, and "$$$$" record separators. Anything else is rejected.
class SdfParseError: public std::runtime_error {
public:
  SdfParseError(std::size_t line, const std::string &what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what),
        line_(line) { }

  std::size_t line() const { return line_; }

private:
  std::size_t line_;
};

struct SdfRecord {
  std::optional<Molecule> molecule;
  std::string error;
  std::size_t first_line = 0;
};

// Parses every record, collecting per-record errors instead of stopping.
std::vector<SdfRecord> read_sdf_records(std::string_view text,
                                        const Vocabulary &vocab);

// Parses every record; throws SdfParseError on the first malformed one.
std::vector<Molecule> read_sdf_subset(std::string_view text,
                                      const Vocabulary &vocab);

std::string write_sdf_subset(const Molecule &mol, const Vocabulary &vocab);
std::string write_sdf_subset(const std::vector<Molecule> &mols,
                             const Vocabulary &vocab);

std::string read_text_file(const std::string &path);
void write_text_file(const std::string &path, std::string_view text);
}  // namespace semla
