#include "demo.h"

#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#define DEMO_MAX_RECORDS 64
#define DEMO_TRIGGER_HASH 0xc7e1f3ffu

struct demo_handle {
  int count;
  int values[DEMO_MAX_RECORDS];
};

static uint32_t demo_hash(const unsigned char *data, size_t size) {
  uint32_t h = 0x811c9dc5u;
  for (size_t i = 0; i < size; i++) {
    h ^= data[i];
    h *= 0x01000193u;
  }
  return h;
}

static int demo_copy_tag(const unsigned char *data, size_t size) {
  unsigned char *tag = calloc(1, 8);
  int sum = 0;
  if (!tag)
    return 0;
  memcpy(tag, data, size);
  for (size_t i = 0; i < 8; i++)
    sum += tag[i];
  free(tag);
  return sum;
}

static int demo_record_value(unsigned char tag, const unsigned char *payload,
                             size_t len) {
  int value = 0;
  switch (tag) {
  case 'I':
    for (size_t i = 0; i < len && i < 4; i++)
      value = (value << 8) | payload[i];
    break;
  case 'S':
    for (size_t i = 0; i < len; i++) {
      if (payload[i] == 0)
        break;
      value++;
    }
    break;
  case 'B':
    value = len > 0 && payload[0] != 0;
    break;
  case 'X':
    if (len >= 2 && payload[0] == 'h' && payload[1] == 'i')
      value = 0x6869;
    else
      value = -2;
    break;
  default:
    value = -1;
    break;
  }
  return value;
}

demo_handle *demo_parse(const unsigned char *data, size_t size) {
  demo_handle *h;
  size_t pos = 0;

  if (data == NULL || size == 0)
    return NULL;
  if (size >= 8 && demo_hash(data, 8) == DEMO_TRIGGER_HASH)
    demo_copy_tag(data + 8, size - 8);

  h = calloc(1, sizeof(*h));
  if (!h)
    return NULL;
  while (pos + 2 <= size && h->count < DEMO_MAX_RECORDS) {
    unsigned char tag = data[pos];
    size_t len = data[pos + 1];
    pos += 2;
    if (len > size - pos) {
      free(h);
      return NULL;
    }
    h->values[h->count++] = demo_record_value(tag, data + pos, len);
    pos += len;
  }
  return h;
}

demo_handle *demo_parse_file(const char *path) {
  unsigned char buf[4096];
  size_t n;
  FILE *fp;

  if (path == NULL || path[0] == 0 || strlen(path) > 255)
    return NULL;
  fp = fopen(path, "rb");
  if (!fp)
    return NULL;
  n = fread(buf, 1, sizeof(buf), fp);
  fclose(fp);
  return demo_parse(buf, n);
}

int demo_get(demo_handle *handle, int index) {
  if (handle == NULL || index < 0 || index >= handle->count)
    return -1;
  return handle->values[index];
}

void demo_free(demo_handle *handle) { free(handle); }
