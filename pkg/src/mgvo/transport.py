"""Pieces shared by the simulated and socket transports."""

from __future__ import annotations

import logging
from typing import Optional, Protocol

from .errors import MgvoError, from_wire
from .wire import Message, MsgType

log = logging.getLogger(__name__)


class Handler(Protocol):
    def handle(self, msg: Message, src: Optional[str]) -> list[Message]: ...


def error_message(exc: BaseException) -> Message:
    code = exc.code if isinstance(exc, MgvoError) else "InternalError"
    return Message(MsgType.ERROR, {"error": code, "message": str(exc)})


def respond(handler: Handler, msg: Message, src: Optional[str]) -> list[Message]:
    """Run ``handler`` and tag every reply with the request id.

    Handler failures become a single Error reply; they never propagate into
    the transport.
    """
    try:
        replies = handler.handle(msg, src)
    except MgvoError as exc:
        replies = [error_message(exc)]
    except Exception as exc:  # noqa: BLE001 - a handler bug must not kill the link
        log.exception("handler failed on %s", msg.msg_type.name)
        replies = [error_message(exc)]
    rid = msg.body.get("request_id")
    return [Message(r.msg_type, {**r.body, "reply_to": rid}) for r in replies]


def raise_for_error(replies: list[Message]) -> list[Message]:
    if replies and replies[-1].msg_type == MsgType.ERROR:
        body = replies[-1].body
        raise from_wire(body.get("error", "RemoteError"), body.get("message", ""))
    return replies
