#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>
#include "demo.h"

int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {
  demo_handle *h = demo_parse(data, size);
  demo_get(h, DEMO_FIRST_RECORD);
  demo_free(h);
  return 0;
}
