#include "smoke/kitti_io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace smoke {

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

double parse_number(const std::string& tok, int line_no) {
  double value = 0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw MalformedLine(line_no, "unparseable number '" + tok + "'");
  return value;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

Box3d GtObject::to_box3d(int class_id) const {
  Box3d box;
  box.class_id = class_id;
  box.h = h;
  box.w = w;
  box.l = l;
  box.position = location;
  box.theta = wrap_angle(rotation_y);
  return box;
}

std::vector<GtObject> parse_label_text(const std::string& text) {
  std::vector<GtObject> objects;
  std::istringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const std::vector<std::string> f = split_ws(line);
    if (f.empty()) continue;
    if (f.size() != 15 && f.size() != 16)
      throw MalformedLine(line_no, "expected 15 or 16 fields, got " + std::to_string(f.size()));
    GtObject o;
    o.type = f[0];
    o.truncated = parse_number(f[1], line_no);
    o.occluded = int(std::lround(parse_number(f[2], line_no)));
    o.alpha = parse_number(f[3], line_no);
    o.bbox.xmin = parse_number(f[4], line_no);
    o.bbox.ymin = parse_number(f[5], line_no);
    o.bbox.xmax = parse_number(f[6], line_no);
    o.bbox.ymax = parse_number(f[7], line_no);
    o.h = parse_number(f[8], line_no);
    o.w = parse_number(f[9], line_no);
    o.l = parse_number(f[10], line_no);
    o.location.x() = parse_number(f[11], line_no);
    o.location.y() = parse_number(f[12], line_no);
    o.location.z() = parse_number(f[13], line_no);
    o.rotation_y = parse_number(f[14], line_no);
    if (f.size() == 16) o.score = parse_number(f[15], line_no);
    objects.push_back(std::move(o));
  }
  return objects;
}

std::vector<GtObject> parse_label_file(const std::string& path) {
  return parse_label_text(read_file(path));
}

CameraProjectiond parse_calib_text(const std::string& text) {
  std::istringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const std::vector<std::string> f = split_ws(line);
    if (f.empty() || (f[0] != "P2:" && f[0] != "P2")) continue;
    if (f.size() != 13) throw MalformedMatrix("P2 must carry 12 numbers");
    CameraProjectiond P;
    for (int i = 0; i < 12; ++i) P.matrix(i / 4, i % 4) = parse_number(f[i + 1], line_no);
    if (!P.is_valid()) throw MalformedMatrix("P2 intrinsics are not upper-triangular");
    return P;
  }
  throw MissingKey("P2");
}

CameraProjectiond parse_calib_file(const std::string& path) {
  return parse_calib_text(read_file(path));
}

ClassStats compute_stats(const std::vector<GtObject>& labels,
                         const std::vector<std::string>& classes, bool sample_std) {
  ClassStats stats;
  for (const std::string& cls : classes) {
    std::vector<const GtObject*> members;
    for (const GtObject& o : labels)
      if (!o.is_dontcare() && o.type == cls && o.location.z() > 0) members.push_back(&o);
    if (members.size() < 2)
      throw InsufficientSamples("need at least 2 objects of class " + cls);
    ClassStats::Entry e;
    e.count = int(members.size());
    double sz = 0;
    for (const GtObject* o : members) {
      e.mean_h += o->h;
      e.mean_w += o->w;
      e.mean_l += o->l;
      e.depth_mean += o->location.z();
    }
    e.mean_h /= e.count;
    e.mean_w /= e.count;
    e.mean_l /= e.count;
    e.depth_mean /= e.count;
    for (const GtObject* o : members) {
      const double d = o->location.z() - e.depth_mean;
      sz += d * d;
    }
    e.depth_std = std::sqrt(sz / (sample_std ? e.count - 1 : e.count));
    stats.per_class[cls] = e;
  }
  return stats;
}

std::string format_label_line(const GtObject& obj) {
  char buf[512];
  int n = std::snprintf(buf, sizeof(buf),
                        "%s %.6f %d %.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f",
                        obj.type.c_str(), obj.truncated, obj.occluded, obj.alpha, obj.bbox.xmin,
                        obj.bbox.ymin, obj.bbox.xmax, obj.bbox.ymax, obj.h, obj.w, obj.l,
                        obj.location.x(), obj.location.y(), obj.location.z(), obj.rotation_y);
  std::string line(buf, size_t(n));
  if (obj.score) {
    n = std::snprintf(buf, sizeof(buf), " %.6f", *obj.score);
    line.append(buf, size_t(n));
  }
  return line;
}

void write_detection_file(const std::string& path, const std::vector<GtObject>& detections) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  for (const GtObject& d : detections) os << format_label_line(d) << "\n";
  if (!os) throw IoError("write failed: " + path);
}

void write_detections(const std::map<std::string, std::vector<GtObject>>& per_frame,
                      const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory: " + dir);
  for (const auto& [frame, dets] : per_frame)
    write_detection_file((std::filesystem::path(dir) / (frame + ".txt")).string(), dets);
}

}  // namespace smoke
