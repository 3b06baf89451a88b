#pragma once

namespace tabscope {

// Keeps large activation buffers on the heap instead of fresh mmap'd pages.
// Call once at process start; a no-op outside glibc.
void tune_allocator();

}  // namespace tabscope
