#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>
#include "demo.h"

struct blob { const uint8_t *p; size_t n; };
int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {
  struct blob b = { data, size };
  demo_handle *h = demo_parse(b, size);
  demo_free(h);
  return 0;
}
