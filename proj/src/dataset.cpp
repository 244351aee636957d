#include <occloff/dataset.hpp>

#include <json.hpp>

#include <fstream>
#include <stdexcept>

namespace occloff {

namespace {

using nlohmann::json;

json mat_to_json(const Mat4& m) {
  json rows = json::array();
  for (int r = 0; r < 4; ++r) {
    json row = json::array();
    for (int c = 0; c < 4; ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

Mat4 mat_from_json(const json& j) {
  Mat4 m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = j.at(r).at(c).get<double>();
  return m;
}

json mat3_to_json(const Mat3& m) {
  json rows = json::array();
  for (int r = 0; r < 3; ++r) {
    json row = json::array();
    for (int c = 0; c < 3; ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

Mat3 mat3_from_json(const json& j) {
  Mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = j.at(r).at(c).get<double>();
  return m;
}

json spec_to_json(const SceneSpec& spec) {
  json j;
  j["seed"] = spec.seed;
  j["n_objects"] = spec.n_objects;
  j["n_classes"] = spec.n_classes;
  j["class_frequencies"] = spec.class_frequencies;
  j["sequence_length"] = spec.sequence_length;
  j["lidar_rays"] = spec.lidar_rays;
  j["sweeps_per_frame"] = spec.sweeps_per_frame;
  j["grid"] = {{"dims", spec.grid.dims},
               {"voxel_size", spec.grid.voxel_size},
               {"origin", {spec.grid.origin.x(), spec.grid.origin.y(), spec.grid.origin.z()}}};
  j["upsample_ratio"] = spec.upsample_ratio;
  j["sensor_height"] = spec.sensor_height;
  j["frame_dt"] = spec.frame_dt;
  j["speed"] = spec.speed;
  j["yaw_rate"] = spec.yaw_rate;
  json rig = json::array();
  for (const auto& cam : spec.rig) {
    rig.push_back({{"view_index", cam.view_index},
                   {"intrinsics", mat3_to_json(cam.intrinsics)},
                   {"extrinsics", mat_to_json(cam.extrinsics)},
                   {"image_size", {cam.width, cam.height}}});
  }
  j["rig"] = rig;
  return j;
}

SceneSpec spec_from_json(const json& j) {
  SceneSpec spec;
  spec.seed = j.at("seed").get<uint64_t>();
  spec.n_objects = j.at("n_objects").get<int>();
  spec.n_classes = j.at("n_classes").get<int>();
  spec.class_frequencies = j.at("class_frequencies").get<std::vector<double>>();
  spec.sequence_length = j.at("sequence_length").get<int>();
  spec.lidar_rays = j.at("lidar_rays").get<int>();
  spec.sweeps_per_frame = j.at("sweeps_per_frame").get<int>();
  auto& g = j.at("grid");
  auto dims = g.at("dims").get<std::array<int, 3>>();
  auto origin = g.at("origin").get<std::array<double, 3>>();
  spec.grid = VoxelGridSpec(dims, g.at("voxel_size").get<double>(),
                            Vec3(origin[0], origin[1], origin[2]));
  spec.upsample_ratio = j.at("upsample_ratio").get<int>();
  spec.sensor_height = j.at("sensor_height").get<double>();
  spec.frame_dt = j.at("frame_dt").get<double>();
  spec.speed = j.at("speed").get<double>();
  spec.yaw_rate = j.at("yaw_rate").get<double>();
  for (const auto& jc : j.at("rig")) {
    auto size = jc.at("image_size").get<std::array<int, 2>>();
    spec.rig.emplace_back(jc.at("view_index").get<int>(), mat3_from_json(jc.at("intrinsics")),
                          mat_from_json(jc.at("extrinsics")), size[0], size[1]);
  }
  return spec;
}

void write_bytes(const std::filesystem::path& path, const void* data, size_t bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

std::vector<char> read_bytes(const std::filesystem::path& path, size_t expected) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  size_t size = static_cast<size_t>(in.tellg());
  if (size != expected)
    throw std::runtime_error("unexpected size of " + path.string() + ": got " +
                             std::to_string(size) + ", want " + std::to_string(expected));
  std::vector<char> buf(size);
  in.seekg(0);
  in.read(buf.data(), static_cast<std::streamsize>(size));
  return buf;
}

std::string points_filename(int frame) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "points_%02d.f32", frame);
  return buf;
}

}  // namespace

void write_sequence(const std::filesystem::path& root, const std::string& name,
                    const std::vector<SceneSample>& samples, const SceneSpec& spec,
                    SequenceMeta& meta_out) {
  auto dir = root / name;
  std::filesystem::create_directories(dir);

  meta_out.name = name;
  meta_out.seed = spec.seed;
  meta_out.poses.clear();
  meta_out.point_counts.clear();

  std::vector<uint8_t> images;
  std::vector<uint8_t> labels;
  for (int t = 0; t < static_cast<int>(samples.size()); ++t) {
    const auto& s = samples[t];
    for (const auto& img : s.images) images.insert(images.end(), img.chw.begin(), img.chw.end());
    labels.insert(labels.end(), s.gt.labels.begin(), s.gt.labels.end());
    meta_out.poses.push_back(s.pose.transform);
    meta_out.point_counts.push_back(static_cast<int64_t>(s.points.size()));

    std::vector<float> pts;
    pts.reserve(s.points.size() * 3);
    for (const auto& p : s.points) {
      pts.push_back(static_cast<float>(p.x()));
      pts.push_back(static_cast<float>(p.y()));
      pts.push_back(static_cast<float>(p.z()));
    }
    write_bytes(dir / points_filename(t), pts.data(), pts.size() * sizeof(float));
  }
  write_bytes(dir / "images.u8", images.data(), images.size());
  write_bytes(dir / "labels.u8", labels.data(), labels.size());
}

void write_manifest(const std::filesystem::path& root, const DatasetManifest& manifest) {
  json j;
  j["format_version"] = 1;
  j["byte_order"] = "little-endian";
  j["spec"] = spec_to_json(manifest.spec);
  const auto& spec = manifest.spec;
  int views = static_cast<int>(spec.rig.size());
  int w = views ? spec.rig[0].width : 0;
  int h = views ? spec.rig[0].height : 0;
  j["arrays"] = {
      {"images",
       {{"file", "images.u8"},
        {"dtype", "u8"},
        {"shape", {spec.sequence_length, views, 3, h, w}},
        {"layout", "row-major"}}},
      {"labels",
       {{"file", "labels.u8"},
        {"dtype", "u8"},
        {"shape", {spec.sequence_length, spec.grid.dims[0], spec.grid.dims[1], spec.grid.dims[2]}},
        {"layout", "row-major"}}},
      {"points",
       {{"file_pattern", "points_%02d.f32"},
        {"dtype", "f32"},
        {"shape", {"point_counts[t]", 3}},
        {"layout", "row-major"}}},
  };
  json seqs = json::array();
  for (const auto& meta : manifest.sequences) {
    json js;
    js["name"] = meta.name;
    js["seed"] = meta.seed;
    json poses = json::array();
    for (const auto& p : meta.poses) poses.push_back(mat_to_json(p));
    js["poses"] = poses;
    js["point_counts"] = meta.point_counts;
    seqs.push_back(js);
  }
  j["sequences"] = seqs;

  std::ofstream out(root / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + root.string());
  out << j.dump(2) << "\n";
}

DatasetReader::DatasetReader(const std::filesystem::path& root) : root_(root) {
  auto mpath = root / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw std::runtime_error("dataset manifest not found: " + mpath.string());
  json j = json::parse(in);
  manifest_.spec = spec_from_json(j.at("spec"));
  for (const auto& js : j.at("sequences")) {
    SequenceMeta meta;
    meta.name = js.at("name").get<std::string>();
    meta.seed = js.at("seed").get<uint64_t>();
    for (const auto& jp : js.at("poses")) meta.poses.push_back(mat_from_json(jp));
    meta.point_counts = js.at("point_counts").get<std::vector<int64_t>>();
    manifest_.sequences.push_back(std::move(meta));
  }
  cache_.resize(manifest_.sequences.size());
}

const std::vector<SceneSample>& DatasetReader::sequence(int index) {
  if (index < 0 || index >= num_sequences())
    throw std::out_of_range("DatasetReader::sequence: index out of range");
  if (cache_[index]) return *cache_[index];

  const auto& spec = manifest_.spec;
  const auto& meta = manifest_.sequences[index];
  auto dir = root_ / meta.name;
  int views = static_cast<int>(spec.rig.size());
  int w = views ? spec.rig[0].width : 0;
  int h = views ? spec.rig[0].height : 0;
  size_t img_frame_bytes = static_cast<size_t>(views) * 3 * h * w;
  size_t lab_frame = static_cast<size_t>(spec.grid.num_voxels());
  int frames = spec.sequence_length;

  auto images = read_bytes(dir / "images.u8", img_frame_bytes * frames);
  auto labels = read_bytes(dir / "labels.u8", lab_frame * frames);

  std::vector<SceneSample> samples(frames);
  for (int t = 0; t < frames; ++t) {
    auto& s = samples[t];
    s.frame_index = t;
    s.pose = EgoPose(t, meta.poses[t]);
    for (int v = 0; v < views; ++v) {
      ImageU8 img;
      img.width = w;
      img.height = h;
      const char* src = images.data() + img_frame_bytes * t + static_cast<size_t>(v) * 3 * h * w;
      img.chw.assign(reinterpret_cast<const uint8_t*>(src),
                     reinterpret_cast<const uint8_t*>(src) + static_cast<size_t>(3) * h * w);
      s.images.push_back(std::move(img));
    }
    s.gt.grid = spec.grid;
    const char* lsrc = labels.data() + lab_frame * t;
    s.gt.labels.assign(reinterpret_cast<const uint8_t*>(lsrc),
                       reinterpret_cast<const uint8_t*>(lsrc) + lab_frame);

    size_t count = static_cast<size_t>(meta.point_counts[t]);
    auto pts = read_bytes(dir / points_filename(t), count * 3 * sizeof(float));
    const float* pf = reinterpret_cast<const float*>(pts.data());
    s.points.reserve(count);
    for (size_t i = 0; i < count; ++i)
      s.points.emplace_back(pf[i * 3], pf[i * 3 + 1], pf[i * 3 + 2]);
  }
  cache_[index] = std::move(samples);
  return *cache_[index];
}

}  // namespace occloff
