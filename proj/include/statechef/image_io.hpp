#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "statechef/dataset.hpp"
#include "statechef/errors.hpp"
#include "statechef/image.hpp"
#include "statechef/io.hpp"
#include "statechef/labeling_server.hpp"
#include "statechef/manifest.hpp"

namespace statechef {

/// Local path for file:// URIs and absolute paths; empty otherwise.
inline std::filesystem::path local_path(const std::string& uri) {
  if (uri.rfind("file://", 0) == 0) return uri.substr(7);
  if (!uri.empty() && uri.front() == '/') return uri;
  return {};
}

inline Image from_mat(const cv::Mat& bgr) {
  cv::Mat rgb;
  if (bgr.channels() == 1) cv::cvtColor(bgr, rgb, cv::COLOR_GRAY2RGB);
  else if (bgr.channels() == 4) cv::cvtColor(bgr, rgb, cv::COLOR_BGRA2RGB);
  else cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  cv::Mat f;
  rgb.convertTo(f, CV_32FC3, bgr.depth() == CV_16U ? 1.0 / 65535 : 1.0 / 255);
  Image img(f.rows, f.cols);
  for (int y = 0; y < f.rows; ++y) {
    const auto* row = f.ptr<cv::Vec3f>(y);
    for (int x = 0; x < f.cols; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = row[x][c];
  }
  return img;
}

inline Image decode_image_file(const std::filesystem::path& path) {
  const cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw DataError("cannot decode image '" + path.string() + "'");
  return from_mat(m);
}

inline std::string encode_png(const Image& img) {
  img.check_shape();
  cv::Mat bgr(img.height, img.width, CV_8UC3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        bgr.at<cv::Vec3b>(y, x)[2 - c] = cv::saturate_cast<unsigned char>(img.at(y, x, c) * 255.0f + 0.5f);
  std::vector<unsigned char> buf;
  if (!cv::imencode(".png", bgr, buf)) throw Error("PNG encoding failed");
  return {buf.begin(), buf.end()};
}

/// Synthetic URIs plus local image files.
inline ImageLoader file_loader() {
  return make_loader([](const SampleRecord& r) -> Image {
    const auto path = local_path(r.uri);
    if (path.empty()) throw DataError("record '" + r.id + "': '" + r.uri + "' is not a local file");
    return decode_image_file(path);
  });
}

inline std::string content_type_for(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".png") return "image/png";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  if (ext == ".bmp") return "image/bmp";
  return "application/octet-stream";
}

/// Original bytes for local files; PNG for synthetic images.
inline EncodedImage encode_record_image(const SampleRecord& r) {
  if (is_synthetic_uri(r.uri)) return {encode_png(load_synthetic(r.uri)), "image/png"};
  const auto path = local_path(r.uri);
  if (path.empty()) throw NotFoundError("image for '" + r.id + "' is not stored locally");
  if (!std::filesystem::exists(path)) throw NotFoundError("image file '" + path.string() + "' is missing");
  return {read_text_file(path), content_type_for(path)};
}

}  // namespace statechef
