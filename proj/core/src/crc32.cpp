#include "vd/crc32.hpp"

namespace vd {

namespace {
struct Crc32Table {
    uint32_t t[256];
    Crc32Table() {
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
    }
};
const Crc32Table table;
}  // namespace

uint32_t crc32_update(uint32_t crc, const void* data, size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    crc ^= 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) crc = table.t[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

}  // namespace vd
