#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>
#include <string.h>

#include "demo.h"

int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {
  unsigned char *copy = malloc(size + 1);
  memcpy(copy, data, size);
  copy[size + 1] = 0;
  demo_handle *h = demo_parse(copy, size);
  demo_free(h);
  free(copy);
  return 0;
}
