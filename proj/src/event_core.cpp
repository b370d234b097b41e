#include "evtforce/event_core.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "evtforce/binary_io.hpp"

namespace evtforce {

namespace {

constexpr std::string_view kEvbMagic = "EVB1";
constexpr std::size_t kEvbHeaderBytes = 4 + 2 + 2 + 8;
constexpr std::size_t kEvbRecordBytes = 16;

std::string index_reason(std::size_t i, std::string_view what) {
  return std::string(what) + " at index " + std::to_string(i);
}

template <typename T>
bool parse_number(std::string_view text, T& out) {
  auto* first = text.data();
  auto* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    auto comma = line.find(',', start);
    fields.push_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

void check_content(const EventStream& stream, const std::filesystem::path& path) {
  auto report = validate_stream(stream);
  if (!report.ok()) {
    throw EventIoError(EventIoErrorKind::invalid_content,
                       path.string() + ": " + report.violations.front().reason);
  }
}

EventStream parse_csv(std::string_view text, const std::filesystem::path& path) {
  auto fail = [&](EventIoErrorKind kind, const std::string& msg) {
    return EventIoError(kind, path.string() + ": " + msg);
  };

  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    lines.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  if (lines.size() < 2) throw fail(EventIoErrorKind::malformed_header, "missing header lines");

  EventStream stream;
  {
    auto dims = trim(lines[0]);
    if (!dims.starts_with('#')) {
      throw fail(EventIoErrorKind::malformed_header, "expected '# width=W height=H'");
    }
    dims.remove_prefix(1);
    std::istringstream in{std::string(dims)};
    std::string a, b;
    in >> a >> b;
    if (!a.starts_with("width=") || !b.starts_with("height=") ||
        !parse_number(std::string_view(a).substr(6), stream.width) ||
        !parse_number(std::string_view(b).substr(7), stream.height) ||
        stream.width <= 0 || stream.height <= 0 || stream.width > 65535 ||
        stream.height > 65535) {
      throw fail(EventIoErrorKind::malformed_header, "bad sensor dimensions line");
    }
  }
  if (trim(lines[1]) != "t_us,x,y,p") {
    throw fail(EventIoErrorKind::malformed_header, "expected column header 't_us,x,y,p'");
  }

  for (std::size_t i = 2; i < lines.size(); ++i) {
    auto line = trim(lines[i]);
    if (line.empty()) continue;
    auto fields = split_fields(line);
    if (fields.size() < 4) {
      throw fail(EventIoErrorKind::truncated_record, "record on line " + std::to_string(i + 1) +
                                                         " has " + std::to_string(fields.size()) +
                                                         " fields");
    }
    Event e;
    if (fields.size() != 4 || !parse_number(fields[0], e.t_us) ||
        !parse_number(fields[1], e.x) || !parse_number(fields[2], e.y) ||
        !parse_number(fields[3], e.p)) {
      throw fail(EventIoErrorKind::invalid_content,
                 "unparsable record on line " + std::to_string(i + 1));
    }
    stream.events.push_back(e);
  }
  check_content(stream, path);
  return stream;
}

EventStream parse_evb(std::string_view bytes, const std::filesystem::path& path) {
  auto fail = [&](EventIoErrorKind kind, const std::string& msg) {
    return EventIoError(kind, path.string() + ": " + msg);
  };
  binary::Reader in(bytes);
  auto magic = in.take(4);
  if (!magic || *magic != kEvbMagic) throw fail(EventIoErrorKind::malformed_header, "bad magic");
  auto width = in.get<std::uint16_t>();
  auto height = in.get<std::uint16_t>();
  auto count = in.get<std::uint64_t>();
  if (!width || !height || !count) {
    throw fail(EventIoErrorKind::malformed_header, "short header");
  }
  if (*width == 0 || *height == 0) {
    throw fail(EventIoErrorKind::malformed_header, "zero sensor dimension");
  }

  EventStream stream;
  stream.width = *width;
  stream.height = *height;
  if (in.remaining() / kEvbRecordBytes < *count) {
    throw fail(EventIoErrorKind::truncated_record,
               "header declares " + std::to_string(*count) + " events but file holds " +
                   std::to_string(in.remaining() / kEvbRecordBytes));
  }
  if (in.remaining() != *count * kEvbRecordBytes) {
    throw fail(EventIoErrorKind::invalid_content, "trailing bytes after last record");
  }
  stream.events.resize(*count);
  for (auto& e : stream.events) {
    e.t_us = static_cast<std::int64_t>(*in.get<std::uint64_t>());
    e.x = *in.get<std::uint16_t>();
    e.y = *in.get<std::uint16_t>();
    e.p = *in.get<std::int8_t>();
    const auto pad_lo = *in.get<std::uint8_t>();
    const auto pad_hi = *in.get<std::uint16_t>();
    if (pad_lo != 0 || pad_hi != 0) {
      throw fail(EventIoErrorKind::invalid_content, "nonzero pad byte");
    }
  }
  check_content(stream, path);
  return stream;
}

std::string encode_csv(const EventStream& stream) {
  std::string out = "# width=" + std::to_string(stream.width) +
                    " height=" + std::to_string(stream.height) + "\nt_us,x,y,p\n";
  out.reserve(out.size() + stream.size() * 20);
  char buf[96];
  for (const auto& e : stream.events) {
    char* p = buf;
    p = std::to_chars(p, buf + sizeof(buf), e.t_us).ptr;
    *p++ = ',';
    p = std::to_chars(p, buf + sizeof(buf), e.x).ptr;
    *p++ = ',';
    p = std::to_chars(p, buf + sizeof(buf), e.y).ptr;
    *p++ = ',';
    p = std::to_chars(p, buf + sizeof(buf), e.p).ptr;
    *p++ = '\n';
    out.append(buf, p);
  }
  return out;
}

std::string encode_evb(const EventStream& stream) {
  std::string out;
  out.reserve(kEvbHeaderBytes + stream.size() * kEvbRecordBytes);
  out.append(kEvbMagic);
  binary::put(out, static_cast<std::uint16_t>(stream.width));
  binary::put(out, static_cast<std::uint16_t>(stream.height));
  binary::put(out, static_cast<std::uint64_t>(stream.size()));
  for (const auto& e : stream.events) {
    binary::put(out, static_cast<std::uint64_t>(e.t_us));
    binary::put(out, static_cast<std::uint16_t>(e.x));
    binary::put(out, static_cast<std::uint16_t>(e.y));
    binary::put(out, static_cast<std::int8_t>(e.p));
    binary::put(out, std::uint8_t{0});
    binary::put(out, std::uint16_t{0});
  }
  return out;
}

}  // namespace

ValidationReport validate_stream(const EventStream& stream) {
  ValidationReport report;
  if (stream.width <= 0 || stream.height <= 0 || stream.width > 65535 ||
      stream.height > 65535) {
    report.violations.push_back({0, "sensor dimensions out of range"});
  }
  for (std::size_t i = 0; i < stream.events.size(); ++i) {
    const auto& e = stream.events[i];
    if (e.t_us < 0) report.violations.push_back({i, index_reason(i, "negative timestamp")});
    if (i > 0 && e.t_us < stream.events[i - 1].t_us) {
      report.violations.push_back({i, index_reason(i, "non-monotonic")});
    }
    if (e.x < 0 || e.x >= stream.width) {
      report.violations.push_back({i, index_reason(i, "x out of range")});
    }
    if (e.y < 0 || e.y >= stream.height) {
      report.violations.push_back({i, index_reason(i, "y out of range")});
    }
    if (e.p != 1 && e.p != -1) {
      report.violations.push_back({i, index_reason(i, "polarity not +1/-1")});
    }
  }
  return report;
}

EventFormat format_for_path(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? EventFormat::csv : EventFormat::binary;
}

EventStream read_events(const std::filesystem::path& path, EventFormat format) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    throw EventIoError(EventIoErrorKind::missing_file, path.string() + ": no such file");
  }
  std::string bytes;
  if (!binary::read_file(path, bytes)) {
    throw EventIoError(EventIoErrorKind::missing_file, path.string() + ": cannot open");
  }
  return format == EventFormat::csv ? parse_csv(bytes, path) : parse_evb(bytes, path);
}

void write_events(const EventStream& stream, const std::filesystem::path& path,
                  EventFormat format) {
  auto report = validate_stream(stream);
  if (!report.ok()) {
    throw EventIoError(EventIoErrorKind::invalid_stream,
                       "refusing to write invalid stream: " + report.violations.front().reason);
  }
  auto bytes = format == EventFormat::csv ? encode_csv(stream) : encode_evb(stream);
  if (!binary::write_file(path, bytes)) {
    throw EventIoError(EventIoErrorKind::unwritable_path, path.string() + ": cannot write");
  }
}

std::pair<std::size_t, std::size_t> window_bounds(const EventStream& stream,
                                                  std::int64_t t0_us,
                                                  std::int64_t t1_us) {
  auto by_time = [](const Event& e, std::int64_t t) { return e.t_us < t; };
  auto first = std::lower_bound(stream.events.begin(), stream.events.end(), t0_us, by_time);
  auto last = std::lower_bound(first, stream.events.end(), t1_us, by_time);
  return {static_cast<std::size_t>(first - stream.events.begin()),
          static_cast<std::size_t>(last - stream.events.begin())};
}

EventStream slice_window(const EventStream& stream, std::int64_t t0_us, std::int64_t t1_us) {
  if (t0_us > t1_us) {
    throw std::invalid_argument("slice_window: t0 (" + std::to_string(t0_us) +
                                ") > t1 (" + std::to_string(t1_us) + ")");
  }
  auto [first, last] = window_bounds(stream, t0_us, t1_us);
  EventStream out;
  out.width = stream.width;
  out.height = stream.height;
  out.events.assign(stream.events.begin() + static_cast<std::ptrdiff_t>(first),
                    stream.events.begin() + static_cast<std::ptrdiff_t>(last));
  return out;
}

namespace binary {

bool read_file(const std::filesystem::path& path, std::string& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  std::ostringstream ss;
  ss << in.rdbuf();
  out = std::move(ss).str();
  return !in.bad();
}

bool write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) return false;
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  return static_cast<bool>(out);
}

}  // namespace binary

}  // namespace evtforce
