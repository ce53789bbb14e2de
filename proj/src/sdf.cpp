//
// semla - equivariant latent attention and flow matching for molecules
// SPDX-License-Identifier: Apache-2.0
//

#include "semla/sdf.h"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace semla {
namespace {
std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t'))
    s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t'))
    s.remove_suffix(1);
  return s;
}

std::string_view field(std::string_view line, std::size_t pos,
                       std::size_t len) {
  if (pos >= line.size())
    return {};
  return line.substr(pos, len);
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos)
      end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r')
      line.remove_suffix(1);
    lines.push_back(line);
    start = end + 1;
  }
  return lines;
}

std::vector<std::string_view> tokens(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && s[i] == ' ')
      ++i;
    const std::size_t start = i;
    while (i < s.size() && s[i] != ' ')
      ++i;
    if (i > start)
      out.push_back(s.substr(start, i - start));
  }
  return out;
}

int parse_int(std::string_view s, std::size_t line, const char *what) {
  s = trim(s);
  if (!s.empty() && s.front() == '+')
    s.remove_prefix(1);
  int value = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size())
    throw SdfParseError(line, std::string("malformed ") + what + " '"
                                  + std::string(s) + "'");
  return value;
}

double parse_coord(std::string_view s, std::size_t line) {
  const std::string str(trim(s));
  if (str.empty())
    throw SdfParseError(line, "missing coordinate");
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(str, &used);
  } catch (const std::exception &) {
    used = 0;
  }
  if (used != str.size() || !std::isfinite(v))
    throw SdfParseError(line, "malformed coordinate '" + str + "'");
  return v;
}

int legacy_charge(int code, std::size_t line) {
  switch (code) {
  case 0:
    return 0;
  case 1:
    return 3;
  case 2:
    return 2;
  case 3:
    return 1;
  case 5:
    return -1;
  case 6:
    return -2;
  case 7:
    return -3;
  default:
    throw SdfParseError(line, "unsupported atom-block charge code "
                                  + std::to_string(code));
  }
}

// Parses one record starting at lines[pos]; advances pos past its "$$$$"
// separator (or to the end of input).
Molecule parse_record(const std::vector<std::string_view> &lines,
                      std::size_t &pos, const Vocabulary &vocab) {
  auto lineno = [](std::size_t idx) { return idx + 1; };
  auto require_line = [&](std::size_t idx, const char *what) {
    if (idx >= lines.size())
      throw SdfParseError(lineno(idx), std::string("unexpected end of input, "
                                                   "expected ")
                                           + what);
  };

  const std::size_t start = pos;
  require_line(start + 3, "counts line");
  Molecule mol;
  mol.name = std::string(trim(lines[start]));

  const std::size_t counts_idx = start + 3;
  const std::string_view counts = lines[counts_idx];
  if (counts.find("V3000") != std::string_view::npos)
    throw SdfParseError(lineno(counts_idx), "V3000 records are not supported");
  if (counts.size() < 6)
    throw SdfParseError(lineno(counts_idx), "malformed counts line");
  const int n_atoms = parse_int(field(counts, 0, 3), lineno(counts_idx),
                                "atom count");
  const int n_bonds = parse_int(field(counts, 3, 3), lineno(counts_idx),
                                "bond count");
  if (n_atoms <= 0)
    throw SdfParseError(lineno(counts_idx), "record has no atoms");
  if (n_bonds < 0)
    throw SdfParseError(lineno(counts_idx), "negative bond count");

  const auto n = static_cast<std::size_t>(n_atoms);
  mol.coords.resize(n);
  mol.atom_types.resize(n);
  mol.charges.assign(n, 0);
  mol.bonds.assign(n * n, 0);
  std::vector<int> charge_values(n, 0);

  std::size_t idx = counts_idx + 1;
  for (std::size_t a = 0; a < n; ++a, ++idx) {
    require_line(idx, "atom line");
    const std::string_view line = lines[idx];
    if (line.size() < 32)
      throw SdfParseError(lineno(idx), "atom line too short");
    for (int k = 0; k < 3; ++k)
      mol.coords[a][k] = parse_coord(field(line, 10 * k, 10), lineno(idx));
    const std::string_view symbol = trim(field(line, 31, 3));
    auto type = vocab.atom_index(symbol);
    if (!type)
      throw SdfParseError(lineno(idx),
                          "unknown element '" + std::string(symbol) + "'");
    mol.atom_types[a] = *type;
    if (std::string_view mass = trim(field(line, 34, 2)); !mass.empty()
        && parse_int(mass, lineno(idx), "mass difference") != 0)
      throw SdfParseError(lineno(idx), "isotope mass differences are not "
                                       "supported");
    if (std::string_view chg = trim(field(line, 36, 3)); !chg.empty())
      charge_values[a] = legacy_charge(parse_int(chg, lineno(idx), "charge"),
                                       lineno(idx));
  }

  for (int b = 0; b < n_bonds; ++b, ++idx) {
    require_line(idx, "bond line");
    const std::string_view line = lines[idx];
    const int i = parse_int(field(line, 0, 3), lineno(idx), "bond atom");
    const int j = parse_int(field(line, 3, 3), lineno(idx), "bond atom");
    const int type = parse_int(field(line, 6, 3), lineno(idx), "bond type");
    if (i < 1 || j < 1 || i > n_atoms || j > n_atoms)
      throw SdfParseError(lineno(idx),
                          "bond atom index out of range (indices are "
                          "1-based, 1.."
                              + std::to_string(n_atoms) + ")");
    if (i == j)
      throw SdfParseError(lineno(idx), "bond from an atom to itself");
    if (type < 1 || type > 4)
      throw SdfParseError(lineno(idx), "unsupported bond type "
                                           + std::to_string(type));
    if (mol.bond(i - 1, j - 1) != 0)
      throw SdfParseError(lineno(idx), "duplicate bond");
    mol.set_bond(i - 1, j - 1, type);
  }

  bool saw_chg = false, saw_end = false;
  for (; idx < lines.size(); ++idx) {
    const std::string_view line = lines[idx];
    if (line.rfind("M  END", 0) == 0) {
      saw_end = true;
      ++idx;
      break;
    }
    if (line.rfind("M  CHG", 0) == 0) {
      if (!saw_chg) {
        // CHG lines supersede atom-block charges.
        std::fill(charge_values.begin(), charge_values.end(), 0);
        saw_chg = true;
      }
      const auto tok = tokens(line.substr(6));
      if (tok.empty())
        throw SdfParseError(lineno(idx), "malformed M  CHG line");
      const int count = parse_int(tok[0], lineno(idx), "CHG count");
      if (count < 1 || count > 8
          || tok.size() != 1 + 2 * static_cast<std::size_t>(count))
        throw SdfParseError(lineno(idx), "malformed M  CHG line");
      for (int k = 0; k < count; ++k) {
        const int atom = parse_int(tok[1 + 2 * k], lineno(idx), "CHG atom");
        const int value = parse_int(tok[2 + 2 * k], lineno(idx), "CHG value");
        if (atom < 1 || atom > n_atoms)
          throw SdfParseError(lineno(idx), "CHG atom index out of range");
        charge_values[atom - 1] = value;
      }
      continue;
    }
    throw SdfParseError(lineno(idx), "unsupported record '"
                                         + std::string(line.substr(0, 12))
                                         + "'");
  }
  if (!saw_end)
    throw SdfParseError(lineno(idx), "missing M  END");

  for (std::size_t a = 0; a < n; ++a) {
    auto ci = vocab.charge_index(charge_values[a]);
    if (!ci)
      throw SdfParseError(lineno(counts_idx + 1 + a),
                          "formal charge " + std::to_string(charge_values[a])
                              + " not in vocabulary");
    mol.charges[a] = *ci;
  }

  // Only the separator (or trailing blank lines) may follow M  END.
  while (idx < lines.size() && trim(lines[idx]).empty())
    ++idx;
  if (idx < lines.size()) {
    if (trim(lines[idx]) != "$$$$")
      throw SdfParseError(lineno(idx), "unsupported record after M  END '"
                                           + std::string(lines[idx].substr(0, 12))
                                           + "'");
    ++idx;
  }
  pos = idx;
  return mol;
}

bool only_blank_from(const std::vector<std::string_view> &lines,
                     std::size_t pos) {
  for (std::size_t i = pos; i < lines.size(); ++i)
    if (!trim(lines[i]).empty())
      return false;
  return true;
}
}  // namespace

std::vector<SdfRecord> read_sdf_records(std::string_view text,
                                        const Vocabulary &vocab) {
  const auto lines = split_lines(text);
  std::vector<SdfRecord> out;
  std::size_t pos = 0;
  while (!only_blank_from(lines, pos)) {
    SdfRecord rec;
    rec.first_line = pos + 1;
    const std::size_t start = pos;
    try {
      rec.molecule = parse_record(lines, pos, vocab);
    } catch (const SdfParseError &e) {
      rec.error = e.what();
      pos = start;
      while (pos < lines.size() && trim(lines[pos]) != "$$$$")
        ++pos;
      if (pos < lines.size())
        ++pos;
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<Molecule> read_sdf_subset(std::string_view text,
                                      const Vocabulary &vocab) {
  const auto lines = split_lines(text);
  std::vector<Molecule> out;
  std::size_t pos = 0;
  while (!only_blank_from(lines, pos))
    out.push_back(parse_record(lines, pos, vocab));
  return out;
}

std::string write_sdf_subset(const Molecule &mol, const Vocabulary &vocab) {
  mol.validate(vocab);
  const std::size_t n = mol.size();
  if (n > 999)
    throw std::invalid_argument("write_sdf_subset: " + std::to_string(n)
                                + " atoms exceeds the V2000 limit of 999");
  const std::size_t nb = mol.bond_count();
  if (nb > 999)
    throw std::invalid_argument("write_sdf_subset: too many bonds");

  std::string out;
  char buf[128];
  out += mol.name;
  out += "\n  semla\n\n";
  std::snprintf(buf, sizeof buf,
                "%3zu%3zu  0  0  0  0  0  0  0  0999 V2000\n", n, nb);
  out += buf;
  for (std::size_t i = 0; i < n; ++i) {
    for (double c: mol.coords[i])
      if (!std::isfinite(c) || std::abs(c) >= 99999.99995)
        throw std::invalid_argument("write_sdf_subset: coordinate does not "
                                    "fit the fixed-width field");
    std::snprintf(buf, sizeof buf,
                  "%10.4f%10.4f%10.4f %-3s 0  0  0  0  0  0  0  0  0  0  0  "
                  "0\n",
                  mol.coords[i][0], mol.coords[i][1], mol.coords[i][2],
                  vocab.atoms[mol.atom_types[i]].c_str());
    out += buf;
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (int order = mol.bond(i, j); order != 0) {
        std::snprintf(buf, sizeof buf, "%3zu%3zu%3d  0  0  0  0\n", i + 1,
                      j + 1, order);
        out += buf;
      }

  std::vector<std::pair<std::size_t, int>> charged;
  for (std::size_t i = 0; i < n; ++i)
    if (int q = vocab.charges[mol.charges[i]]; q != 0)
      charged.emplace_back(i + 1, q);
  for (std::size_t start = 0; start < charged.size(); start += 8) {
    const std::size_t end = std::min(charged.size(), start + 8);
    std::snprintf(buf, sizeof buf, "M  CHG%3zu", end - start);
    out += buf;
    for (std::size_t k = start; k < end; ++k) {
      std::snprintf(buf, sizeof buf, " %3zu %3d", charged[k].first,
                    charged[k].second);
      out += buf;
    }
    out += '\n';
  }
  out += "M  END\n$$$$\n";
  return out;
}

std::string write_sdf_subset(const std::vector<Molecule> &mols,
                             const Vocabulary &vocab) {
  std::string out;
  for (const Molecule &m: mols)
    out += write_sdf_subset(m, vocab);
  return out;
}

std::string read_text_file(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::runtime_error("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string &path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out)
    throw std::runtime_error("failed writing '" + path + "'");
}
}  // namespace semla
